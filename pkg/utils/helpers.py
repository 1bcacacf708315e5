import csv
import json
import os
import tempfile
import time
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Sequence, Tuple, Type

import numpy as np

def retry_with_backoff(max_retries: int = 3, backoff_factor: float = 0.1,
                       exceptions: Tuple[Type[BaseException], ...] = (OSError,)):
    """Decorator for retrying functions with exponential backoff"""

    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            for attempt in range(max_retries):
                try:
                    return func(*args, **kwargs)
                except exceptions as e:
                    if attempt == max_retries - 1:
                        raise e

                    wait_time = backoff_factor * (2 ** attempt)
                    time.sleep(wait_time)

            return None
        return wrapper
    return decorator

@retry_with_backoff(max_retries=3)
def atomic_write_bytes(filepath: Path, payload: bytes) -> Path:
    """Write bytes to a sibling temp file, then rename over the target"""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{filepath.name}.", dir=filepath.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, filepath)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return filepath

def atomic_write_text(filepath: Path, text: str) -> Path:
    return atomic_write_bytes(filepath, text.encode("utf-8"))

def save_json(data: Dict[Any, Any], filepath: Path) -> None:
    """Save data as JSON file"""
    atomic_write_text(Path(filepath), json.dumps(data, indent=2, sort_keys=True) + "\n")

def load_json(filepath: Path) -> Dict[Any, Any]:
    """Load JSON file"""
    with open(filepath, 'r', encoding="utf-8") as f:
        return json.load(f)

def format_number(value: Any) -> str:
    """Locale-independent CSV cell; floats use repr so output is reproducible"""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)

def write_csv(filepath: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write a header row plus data rows with '.' decimals and '\\n' line endings"""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, 'w', newline='', encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_number(v) for v in row])
    return filepath

def read_csv(filepath: Path) -> List[Dict[str, str]]:
    with open(filepath, 'r', newline='', encoding="utf-8") as f:
        return list(csv.DictReader(f))
