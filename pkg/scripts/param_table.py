"""Print parameter counts per group and per fusion mode for a model config."""
import argparse

from mfevit.config import load_config, ModelConfig
from mfevit.encoder import count_parameters
from mfevit.harness import format_parameter_table, report_parameters


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="key = value config file (defaults when omitted)")
    args = ap.parse_args()
    cfg = load_config(args.config).model if args.config else ModelConfig()
    for group, n in count_parameters(cfg).groups.items():
        print(f"{group:<20} {n:>12,}")
    print()
    print(format_parameter_table(report_parameters(cfg)))


if __name__ == "__main__":
    main()
