import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from src.utils import append_jsonl

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"
CONFIG_FILE = "config.json"
PLAN_DIR = "plans"


@dataclass
class RunDir:
    """
    Output directory of one training run.

    Example:

        >>> run = RunDir.create_temporary_rundir()
        >>> run.metrics_path.exists()
        False
        >>> run.append_metrics({"step": 0, "l_total": 1.5})
        >>> run.read_file("metrics.jsonl")
        '{"l_total": 1.5, "step": 0}\\n'
    """

    location: Path = field(default_factory=lambda: Path(tempfile.gettempdir()))

    # NOTE:
    # The caller is responsible for deleting the temporary directory
    # and its contents when done with it.
    @classmethod
    def create_temporary_rundir(cls) -> "RunDir":
        return cls(location=Path(tempfile.mkdtemp()))

    def _ensure_location(self):
        self.location.mkdir(parents=True, exist_ok=True)

    def __post_init__(self):
        self.location = Path(self.location)
        self._ensure_location()

    def get_file_path(self, file_name: str) -> Path:
        self._ensure_location()
        return self.location / file_name

    @property
    def metrics_path(self) -> Path:
        return self.get_file_path(METRICS_FILE)

    @property
    def checkpoint_path(self) -> Path:
        return self.get_file_path(CHECKPOINT_FILE)

    @property
    def config_path(self) -> Path:
        return self.get_file_path(CONFIG_FILE)

    def plan_path(self, epoch: int) -> Path:
        return self.get_file_path(PLAN_DIR) / f"epoch_{epoch:03d}.txt"

    def read_file(self, file_name: str) -> str:
        return self.get_file_path(file_name).read_text()

    def write_file(self, file_name: str, content: str) -> None:
        self.get_file_path(file_name).write_text(content)

    def reset_metrics(self) -> None:
        """Start a fresh metrics stream; the writer is append-only afterwards."""
        self.metrics_path.write_text("")

    def append_metrics(self, record: dict[str, object]) -> None:
        append_jsonl(self.metrics_path, record)
