"""Parameter counts, density and measured latency per level on the 4-unit conv preset."""

import argparse

from dvn.experiments import conv_budget


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--size", type=int, default=16, help="input height and width")
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--csv", help="also write the table here")
    args = p.parse_args()
    report = conv_budget(channels=args.channels, size=args.size, runs=args.runs, warmup=args.warmup)
    print(report.pretty())
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report.to_csv())


if __name__ == "__main__":
    main()
