"""Parameter counts of one conditional model against a pairwise CycleGAN fleet."""
import argparse

from ccgan_vc.cli import load_run_config, model_size_rows


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--max-speakers", type=int, default=12)
    p.add_argument("--config", help="flat config file for architecture overrides")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    cfg = load_run_config(args.config, args.overrides)
    print(f"{'n':>3} {'CC-GAN':>12} {'pairs':>6} {'fleet':>15} {'ratio':>8}")
    for n in range(2, args.max_speakers + 1):
        r = model_size_rows(cfg, n)
        print(f"{n:>3} {r['ccgan_total']:>12,} {r['fleet_pairs']:>6} {r['fleet_total']:>15,} {r['ratio']:>8.4f}")


if __name__ == "__main__":
    main()
