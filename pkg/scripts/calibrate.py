"""Rank every reading of the under-specified architecture against the published counts."""
from uvidnet.model import BASELINE_CONFIG, PUBLISHED_PARAMS, build_unet_baseline, calibrate, count_params


def main():
    results = calibrate()
    for r in results:
        print(("* " if r.exact else "  ") + r.describe())
    best = results[0]
    print(f"\nselected: {'exact' if best.exact else 'closest'}; reduction {100 * best.reduction:.2f}%")
    base = build_unet_baseline(BASELINE_CONFIG, seed=None)
    total = count_params(base, include_buffers=True)
    print(f"baseline U-Net: {total:,} (published {PUBLISHED_PARAMS['baseline']:,}, "
          f"delta {total - PUBLISHED_PARAMS['baseline']:+,})")


if __name__ == "__main__":
    main()
