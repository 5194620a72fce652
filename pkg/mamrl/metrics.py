# External module dependencies
from dataclasses import dataclass, fields, astuple
from typing import Any, Type, List
from pathlib import Path
import csv

###############################################################################
# Datatypes
###############################################################################
SCHEMA_VERSION = 1

@dataclass
class MetricsRow:
    schema_version : int
    update : int
    env_steps : int
    return_mean : float
    return_ci_low : float
    return_ci_high : float
    policy_loss : float
    value_loss : float
    entropy : float
    approx_kl : float
    clip_fraction : float
    wall_clock : float

@dataclass
class BenchRow:
    schema_version : int
    model : str
    n_agents : int
    mean_seconds : float
    std_seconds : float
    repetitions : int
    inner : int

@dataclass
class SlopeRow:
    schema_version : int
    model : str
    slope : float

###############################################################################
# Classes
###############################################################################
class CsvLog:
    """Append-only CSV file with a fixed header taken from a row
    dataclass; the header is written when the file is created."""
    def __init__(self, path : Path, row_type : Type[Any]):
        self._path = path
        self._row_type = row_type
        self._columns = [ item.name for item in fields(row_type) ]
        path.parent.mkdir(parents = True, exist_ok = True)
        with path.open('w', newline = '') as file:
            csv.writer(file).writerow(self._columns)

    @property
    def columns(self) -> List[str]:
        return list(self._columns)

    def append(self, row : Any):
        if not isinstance(row, self._row_type):
            raise TypeError('Expected a %s row but got %s' % (
                self._row_type.__name__, type(row).__name__
            ))
        with self._path.open('a', newline = '') as file:
            csv.writer(file).writerow([ _format(value) for value in astuple(row) ])

###############################################################################
# Functions
###############################################################################
def _format(value : Any) -> str:
    if isinstance(value, float): return repr(value)
    return str(value)

def write_rows(path : Path, row_type : Type[Any], rows : List[Any]):
    log = CsvLog(path, row_type)
    for row in rows: log.append(row)

def read_rows(path : Path) -> List[dict]:
    with path.open('r', newline = '') as file:
        return list(csv.DictReader(file))
