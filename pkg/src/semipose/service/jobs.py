"""Background training jobs: one worker thread per job, status behind a lock."""
from __future__ import annotations

import threading
import traceback
import uuid
from dataclasses import dataclass, field
from typing import Callable

from ..config import ConfigError
from ..datagen import DatasetError
from ..model import CheckpointError, ModelError
from ..trainer import TrainingError

# Errors a caller caused (bad config, bad paths) versus genuine runtime failures.
_CONFIG_ERRORS = (ConfigError, DatasetError, CheckpointError, ModelError)


@dataclass
class Job:
    id: str
    state: str = "queued"
    error: str | None = None
    error_kind: str | None = None
    iteration: int = 0
    max_iterations: int = 0
    latest: dict | None = None
    out_dir: str | None = None
    metrics_path: str | None = None
    summary_path: str | None = None
    checkpoint_path: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def snapshot(self) -> dict:
        with self.lock:
            return {
                "job_id": self.id,
                "state": self.state,
                "error": self.error,
                "error_kind": self.error_kind,
                "iteration": self.iteration,
                "max_iterations": self.max_iterations,
                "latest": self.latest,
                "out_dir": self.out_dir,
                "metrics_path": self.metrics_path,
                "summary_path": self.summary_path,
                "checkpoint_path": self.checkpoint_path,
            }


class JobManager:
    def __init__(self) -> None:
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()

    def submit(self, target: Callable[[Job], None]) -> Job:
        job = Job(id=uuid.uuid4().hex[:12])
        with self._lock:
            self._jobs[job.id] = job
        thread = threading.Thread(target=self._run, args=(job, target), daemon=True)
        thread.start()
        return job

    def _run(self, job: Job, target: Callable[[Job], None]) -> None:
        with job.lock:
            job.state = "running"
        try:
            target(job)
        except _CONFIG_ERRORS as e:
            with job.lock:
                job.state = "error"
                job.error = str(e)
                job.error_kind = "config"
        except TrainingError as e:
            with job.lock:
                job.state = "error"
                job.error = str(e)
                job.error_kind = "runtime"
                checkpoint = getattr(e, "checkpoint_path", None)
                if checkpoint:
                    job.checkpoint_path = checkpoint
        except Exception:
            with job.lock:
                job.state = "error"
                job.error = traceback.format_exc(limit=4)
                job.error_kind = "runtime"
        else:
            with job.lock:
                job.state = "done"

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            return self._jobs.get(job_id)

    def list(self) -> list[Job]:
        with self._lock:
            return list(self._jobs.values())
