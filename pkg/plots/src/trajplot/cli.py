"""Script entry: render one figure from a JSON spec file."""

import argparse

import matplotlib.pyplot as plt

from .figures import FigureSpec, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plots", description="Render a figure from experiment CSVs.")
    parser.add_argument("spec", help="path to a JSON figure spec")
    args = parser.parse_args(argv)
    spec = FigureSpec.from_json(args.spec)
    fig = render(spec)
    plt.close(fig)
    print(spec.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
