import logging
import threading

from . import config

logger = logging.getLogger(__name__)


def path_chunks(n_paths: int, n_steps: int, cells: int = None) -> list:
    """
    Split [0, n_paths) into contiguous chunks of about `cells` grid cells.

    Boundaries depend only on the sizes, never on the number of threads.

    >>> path_chunks(10, 4, cells=12)
    [(0, 3), (3, 6), (6, 9), (9, 10)]
    """
    cells = cells or config.CHUNK_CELLS
    per_chunk = max(1, cells // max(1, n_steps))
    return [(start, min(n_paths, start + per_chunk)) for start in range(0, n_paths, per_chunk)]


class PathWorker:
    """
    # Creates a path worker: one thread evaluating its share of path chunks.
    """
    def __init__(self, job, chunks = None):
        self.job = job
        self.chunks = chunks if chunks is not None else []
        self.results = {}
        self.error = None
        self.failed_chunk = None
        self.thread = None

    """
    Append a (chunk_id, start, stop) triple
    """
    def add_chunk(self, chunk_id, start, stop):
        self.chunks.append((chunk_id, start, stop))

    """
    Start the worker thread over its chunks
    """
    def run(self):
        self.thread = threading.Thread(target=self.__run)
        self.thread.start()

    """
    Block until every assigned chunk has run
    """
    def join(self):
        if self.thread:
            self.thread.join()

    def __run(self):
        for chunk_id, start, stop in self.chunks:
            # Stop at the first failure; the caller re-raises it
            try:
                self.results[chunk_id] = self.job(start, stop)
            except Exception as exc:
                self.error = exc
                self.failed_chunk = chunk_id
                return
            logger.debug("chunk %d [%d, %d) done", chunk_id, start, stop)


def run_chunks(job, chunks: list, threads: int = None) -> list:
    """
    Evaluate job(start, stop) on every chunk and return results in chunk order.

    With one thread the chunks run inline. Otherwise chunk i goes to worker
    i % threads; the first error (in chunk order) is re-raised.
    """
    threads = max(1, threads or config.WORKER_THREADS)
    if threads == 1 or len(chunks) == 1:
        return [job(start, stop) for start, stop in chunks]

    workers = [PathWorker(job) for _ in range(min(threads, len(chunks)))]
    for chunk_id, (start, stop) in enumerate(chunks):
        workers[chunk_id % len(workers)].add_chunk(chunk_id, start, stop)
    for worker in workers:
        worker.run()
    for worker in workers:
        worker.join()

    failed = [w for w in workers if w.error is not None]
    if failed:
        raise min(failed, key=lambda w: w.failed_chunk).error
    results = {}
    for worker in workers:
        results.update(worker.results)
    return [results[i] for i in range(len(chunks))]
