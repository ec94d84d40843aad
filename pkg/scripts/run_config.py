"""Run one CLI command against a config from configs/.

    python scripts/run_config.py sweep            # uses configs/sweep.json
    python scripts/run_config.py optimize configs/optimize_thermal.json --workers 2
"""
import sys
from pathlib import Path

from conveyor.cli import COMMANDS, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

if __name__ == "__main__":
    if len(sys.argv) < 2 or sys.argv[1] not in COMMANDS:
        sys.exit(f"usage: run_config.py {{{','.join(sorted(COMMANDS))}}} [config.json] [cli options]")
    command, rest = sys.argv[1], sys.argv[2:]
    if rest and rest[0].endswith(".json"):
        config, rest = rest[0], rest[1:]
    else:
        config = str(CONFIGS / f"{command}.json")
    sys.exit(main([command, "--config", config, *rest]))
