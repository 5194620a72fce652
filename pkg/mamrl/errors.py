###############################################################################
# Exceptions
###############################################################################
class MamrlError(Exception):
    code : int = 1

class ConfigError(MamrlError):
    code = 2

class ContractError(MamrlError):
    code = 3

class DomainError(MamrlError):
    code = 4

class NonFiniteError(MamrlError):
    code = 5

class CheckpointError(MamrlError):
    code = 10

class FormatError(CheckpointError):
    code = 11

class VersionError(CheckpointError):
    code = 12

class TruncatedError(CheckpointError):
    code = 13

class ShapeMismatchError(CheckpointError):
    code = 14
