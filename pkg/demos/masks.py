"""Print one mask of each pretext task and sampler as ASCII art."""
import argparse

from inpaintssl import corruption as cr


def show(bitmap):
    return "\n".join("".join("#" if v else "." for v in row) for row in bitmap)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("-K", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for task in cr.TASKS:
        for sampler in cr.SAMPLERS:
            m = cr.build_mask(task, cr.PatchSpec(args.K, args.size, args.size, sampler), args.seed)
            print(f"{task} {sampler}: coverage {m.coverage}/{args.size ** 2}{' (capped)' if m.capped else ''}")
            print(show(m.bitmap), end="\n\n")


if __name__ == "__main__":
    main()
