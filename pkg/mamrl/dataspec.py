# External module dependencies
from dataclasses import is_dataclass, fields, MISSING
from typing import cast, get_origin, get_args, get_type_hints, Any, Union, List, Dict

# Internal module dependencies
from .errors import ConfigError

###############################################################################
# Type
###############################################################################
DataspecValue = Union[
    bool, int, float, str,
    'Dataspec'
]
Dataspec = Union[
    List['DataspecValue'],
    Dict[str, 'DataspecValue']
]

###############################################################################
# Functions
###############################################################################
def _join(path : str, key : Any) -> str:
    return str(key) if path == '' else '%s.%s' % (path, key)

def _where(path : str) -> str:
    return '<root>' if path == '' else path

def decode(T : type, value : Any) -> Any:
    """Decode a YAML document into the dataclass T. Missing fields take
    their declared defaults; unknown keys and type mismatches raise a
    ConfigError naming the dotted key path."""
    def _value(T : type, value : Any, path : str) -> Any:
        if T in [bool, str, int, float]: return _simple(T, value, path)
        return _document(T, value, path)

    def _composite(T : type, value : Any, path : str) -> Any:
        origin = get_origin(T)
        if origin != None:
            if origin == list: return _list(T, value, path)
            if origin == dict: return _dict(T, value, path)
        raise ConfigError('Unsupported dataspec type %s at %s' % (
            T, _where(path)
        ))

    def _document(T : type, value : Any, path : str) -> Any:
        if not is_dataclass(T): return _composite(T, value, path)
        if value is None: value = dict()
        if not isinstance(value, dict):
            raise ConfigError(
                'Expected a section but got %s for value \"%s\" at %s' % (
                type(value).__name__, str(value), _where(path)
            ))
        hints = get_type_hints(T)
        known = { item.name for item in fields(T) }
        for key in value.keys():
            if key in known: continue
            raise ConfigError('Unknown key %s' % _join(path, key))
        result = {}
        for item in fields(T):
            if item.name in value:
                result[item.name] = _value(
                    hints[item.name], value[item.name], _join(path, item.name)
                )
                continue
            if item.default is MISSING and item.default_factory is MISSING:
                raise ConfigError('Missing required key %s' % (
                    _join(path, item.name)
                ))
        return T(**result)

    def _simple(T : type, value : Any, path : str) -> Any:
        S = type(value)
        if T == S: return value
        if T == float and S == int: return float(value)
        raise ConfigError(
            'Expected a type of %s but got %s for value \"%s\" at %s' % (
            T.__name__, S.__name__, str(value), _where(path)
        ))

    def _list(T : type, value : Any, path : str) -> List[Any]:
        args = get_args(T)
        if len(args) != 1:
            raise ConfigError('Expected list type to have exactly one parameter')
        if isinstance(value, int) and args[0] == int: value = [value]
        if isinstance(value, str) and args[0] == int:
            try: value = [ int(part) for part in value.split(',') ]
            except ValueError:
                raise ConfigError(
                    'Expected comma separated integers but got \"%s\" at %s' % (
                    value, _where(path)
                ))
        if not isinstance(value, list):
            raise ConfigError(
                'Expected a list but got %s for value \"%s\" at %s' % (
                type(value).__name__, str(value), _where(path)
            ))
        value = cast(List[Any], value)
        return [
            _value(args[0], item, _join(path, index))
            for index, item in enumerate(value)
        ]

    def _dict(T : type, value : Any, path : str) -> Dict[Any, Any]:
        if not isinstance(value, dict):
            raise ConfigError('Expected a mapping but got %s at %s' % (
                type(value).__name__, _where(path)
            ))
        value = cast(Dict[Any, Any], value)
        args = get_args(T)
        if len(args) != 2 or args[0] != str:
            raise ConfigError('Expected dict type to be keyed by str')
        for key in value.keys():
            if isinstance(key, str): continue
            raise ConfigError('Expected key %s to be of type str at %s' % (
                key, _where(path)
            ))
        return {
            k: _value(args[1], v, _join(path, k))
            for k, v in value.items()
        }

    return _document(T, value, '')

def encode(T : type, value : Any) -> Dataspec:
    def _value(T : type, value : Any) -> Any:
        if T in [bool, str, int, float]: return _simple(T, value)
        return _document(T, value)

    def _composite(T : type, value : Any) -> Any:
        origin = get_origin(T)
        if origin != None:
            if origin == list: return [ _value(get_args(T)[0], item) for item in value ]
            if origin == dict: return {
                k: _value(get_args(T)[1], v) for k, v in value.items()
            }
        raise ConfigError('Unsupported dataspec type %s' % T)

    def _document(T : type, value : Any) -> Any:
        if not is_dataclass(T): return _composite(T, value)
        hints = get_type_hints(T)
        return {
            item.name : _value(hints[item.name], getattr(value, item.name))
            for item in fields(T)
        }

    def _simple(T : type, value : Any) -> Any:
        if T == float and type(value) == int: return float(value)
        if type(value) == T: return value
        raise ConfigError(
            'Expected a type of %s but got %s for value \"%s\"' % (
            T.__name__, type(value).__name__, str(value)
        ))

    return _document(T, value)
