"""Run the desk-scale benchmark and freeze its tests-to-level counts.

    python benchmarks/freeze_reference.py [--jobs N]

Writes tests/fixtures/reference_counts.json, which the acceptance suite
compares against with zero tolerance.  Rerun only after an intentional
behaviour change, and review the diff.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import tempfile
from pathlib import Path

from covsel.cli import cmd_run
from covsel.config import load_run_config

ROOT = Path(__file__).resolve().parent.parent
CONFIG = ROOT / "configs" / "reference.ini"
FIXTURE = ROOT / "tests" / "fixtures" / "reference_counts.json"


def counts_table(results) -> dict:
    table: dict = {}
    for r in sorted(results, key=lambda r: (r.label, r.config.seed)):
        per = table.setdefault(r.label, {})
        per[str(r.config.seed)] = {f"{lv:g}": n for lv, n in sorted(r.tests_to_level.items())}
    return table


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    cfg = load_run_config(CONFIG)
    with tempfile.TemporaryDirectory() as tmp:
        cfg = dataclasses.replace(cfg, out=Path(tmp))
        results = cmd_run(cfg, jobs=args.jobs)
    FIXTURE.write_text(json.dumps(counts_table(results), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {FIXTURE}")


if __name__ == "__main__":
    main()
