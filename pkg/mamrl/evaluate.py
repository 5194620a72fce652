# External module dependencies
from dataclasses import dataclass
from typing import Any, Callable, Optional, Tuple, List
from threading import Thread
from queue import Queue, Empty

# Internal module dependencies
from . import log

###############################################################################
# Exceptions
###############################################################################
class JobError(Exception):
    def __init__(self, description : str, message : str):
        super().__init__('%s: %s' % (description, message))
        self.description = description
        self.message = message

###############################################################################
# Classes
###############################################################################
Work = Callable[[], Any]

@dataclass
class Job:
    description : str
    work : Work

Entry = Optional[Tuple[int, Job]]

class Worker(Thread):
    def __init__(self,
        dequeue : Callable[[], Entry],
        complete : Callable[[int, Any], None],
        fail : Callable[[int, JobError], None],
        index : int
        ):
        super().__init__(daemon = True)
        self._dequeue = dequeue
        self._complete = complete
        self._fail = fail
        self._index = index

    def run(self):
        while True:
            entry = self._dequeue()
            if entry is None: break
            position, job = entry
            log.debug('Worker %d: %s' % (self._index, job.description))
            try: self._complete(position, job.work())
            except Exception as error:
                failure = JobError(job.description, str(error))
                failure.__cause__ = error
                self._fail(position, failure)

class Pool:
    """Runs independent jobs on worker threads and returns their results
    in job order. The first failing job (by position) is raised as a
    JobError once every job has finished."""
    def __init__(self, worker_count : int):
        self._worker_count = max(1, worker_count)

    @property
    def worker_count(self) -> int:
        return self._worker_count

    def run(self, jobs : List[Job]) -> List[Any]:
        results : List[Any] = [ None ] * len(jobs)
        failures : Queue[Tuple[int, JobError]] = Queue()
        work : Queue[Entry] = Queue()

        def _complete(position : int, result : Any):
            results[position] = result

        def _fail(position : int, error : JobError):
            failures.put((position, error))

        for entry in enumerate(jobs): work.put(entry)
        count = min(self._worker_count, len(jobs))
        for _ in range(count): work.put(None)
        workers = [
            Worker(work.get, _complete, _fail, index + 1)
            for index in range(count)
        ]
        for worker in workers: worker.start()
        for worker in workers: worker.join()

        errors : List[Tuple[int, JobError]] = list()
        while True:
            try: errors.append(failures.get(block = False))
            except Empty: break
        if len(errors) != 0:
            raise min(errors, key = lambda entry: entry[0])[1]
        return results
