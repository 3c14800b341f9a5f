"""Run the seeded property battery over several seeds and print a pass table."""

import argparse
from pathlib import Path

from tresca_vi.cli_io import check_rows, load_config, run_battery, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=Path(__file__).parents[1] / "configs" / "desk_1d.json")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("out/battery"))
    args = ap.parse_args()
    cfg = load_config(args.config)
    rows, failures = [], 0
    for seed in args.seeds:
        reports = run_battery(cfg, seed)
        rows += check_rows(reports, cfg.config_hash, seed)
        bad = [r for r in reports if not r.passed]
        failures += len(bad)
        worst = min(reports, key=lambda r: r.margin)
        print(f"seed {seed}: {len(reports)} checks, {len(bad)} failed, "
              f"tightest {worst.name} margin {worst.margin:.3e}")
    write_csv(rows, args.out / "battery.csv")
    print(f"wrote {args.out / 'battery.csv'}")
    raise SystemExit(1 if failures else 0)


if __name__ == "__main__":
    main()
