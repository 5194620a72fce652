import logging

_logger = logging.getLogger('mamrl')

def _echo(label : str, msg : str):
    if label == '': print('[mamrl] %s' % msg)
    else: print('[mamrl] %s: %s' % (label, msg))

def info(msg : str):
    _logger.info(msg)
    _echo('', msg)

def warning(msg : str):
    _logger.warning(msg)
    _echo('Warning', msg)

def error(msg : str):
    _logger.error(msg)
    _echo('Error', msg)

def critical(msg : str):
    _logger.critical(msg)
    _echo('Critical', msg)

def debug(msg : str):
    _logger.debug(msg)
