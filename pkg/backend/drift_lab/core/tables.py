"""
CSV tables with a config-hash header line.
"""

from pathlib import Path
from typing import Optional

import pandas as pd

FLOAT_FORMAT = "%.10e"


def write_table(df: pd.DataFrame, path, config_hash: Optional[str] = None) -> Path:
    """Write a table; the first line records the config hash when given"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if config_hash:
            f.write(f"# config_hash={config_hash}\n")
        df.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_table(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def read_config_hash(path) -> Optional[str]:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    if first.startswith("# config_hash="):
        return first.split("=", 1)[1]
    return None
