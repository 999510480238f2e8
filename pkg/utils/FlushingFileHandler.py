import logging
import os
import time


class FlushingFileHandler(logging.FileHandler):
    """File handler that flushes every record and mirrors it to ``<dir>/run_async.log``."""

    def __init__(self, filename, mode="a", encoding="utf-8", delay=False, formatter=None):
        os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
        super().__init__(filename, mode, encoding, delay)
        self.formatter = formatter or logging.Formatter('%(asctime)s %(levelname)s %(message)s')
        self.mirror = os.path.join(os.path.dirname(os.path.abspath(filename)), 'run_async.log')

    def emit(self, record):
        super().emit(record)
        self.flush()
        try:
            self.nice_try(record)
        except IOError:
            time.sleep(0.2)
            self.nice_try(record)

    def nice_try(self, record):
        with open(self.mirror, 'a', encoding='utf-8') as f:
            f.write(self.formatter.format(record) + '\n')
