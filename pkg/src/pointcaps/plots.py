"""Standalone SVG line charts for corruption sweeps (one chart per train level)."""

from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
WIDTH, HEIGHT = 480, 320
MARGIN = {"left": 56, "right": 16, "top": 32, "bottom": 88}


def line_chart(series, title, x_label="test level", y_label="accuracy", y_range=(0.0, 1.0)):
    """Render ``series`` (label -> list of (x, y)) as an SVG document string.

    X positions are categorical (evenly spaced in the order of the first
    series), matching level lists such as 0, 1, 2, 5, 10, ... whose spacing is
    not meaningful.
    """
    if not series:
        raise ValueError("line_chart needs at least one series")
    xs = [x for x, _ in next(iter(series.values()))]
    plot_w = WIDTH - MARGIN["left"] - MARGIN["right"]
    plot_h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    lo, hi = y_range

    def px(i):
        return MARGIN["left"] + (plot_w * i / (len(xs) - 1) if len(xs) > 1 else plot_w / 2)

    def py(y):
        frac = (min(max(y, lo), hi) - lo) / (hi - lo)
        return MARGIN["top"] + plot_h * (1 - frac)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    bottom = MARGIN["top"] + plot_h
    out.append(
        f'<polyline fill="none" stroke="black" points="{MARGIN["left"]},{MARGIN["top"]} '
        f'{MARGIN["left"]},{bottom} {MARGIN["left"] + plot_w},{bottom}"/>'
    )
    for k in range(6):
        y = lo + (hi - lo) * k / 5
        out.append(f'<line x1="{MARGIN["left"] - 4}" x2="{MARGIN["left"] + plot_w}" y1="{py(y):.1f}" '
                   f'y2="{py(y):.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{py(y) + 4:.1f}" text-anchor="end">{y:.1f}</text>')
    for i, x in enumerate(xs):
        out.append(f'<text x="{px(i):.1f}" y="{bottom + 16}" text-anchor="middle">{escape(_label(x))}</text>')
    out.append(f'<text x="{MARGIN["left"] + plot_w / 2}" y="{bottom + 32}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(
        f'<text transform="translate(14,{MARGIN["top"] + plot_h / 2}) rotate(-90)" text-anchor="middle">'
        f"{escape(y_label)}</text>"
    )
    for n, (label, points) in enumerate(series.items()):
        colour = PALETTE[n % len(PALETTE)]
        coords = " ".join(f"{px(i):.1f},{py(y):.1f}" for i, (_, y) in enumerate(points))
        out.append(f'<polyline class="series" fill="none" stroke="{colour}" stroke-width="2" points="{coords}"/>')
        lx = MARGIN["left"] + (n % 2) * plot_w / 2
        ly = bottom + 50 + (n // 2) * 16
        out.append(f'<line x1="{lx}" x2="{lx + 18}" y1="{ly - 4}" y2="{ly - 4}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _label(x):
    return f"{x:g}" if isinstance(x, float) else str(x)


def sweep_charts(curves, out_dir, mode):
    """Write one SVG per train level; ``curves`` maps label -> sweep rows.

    Rows are ``(train_level, test_level, accuracy)``. Returns the written paths
    in train-level order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    first = next(iter(curves.values()))
    train_levels = list(dict.fromkeys(row[0] for row in first))
    noun = "Outlier points" if mode == "outliers" else "Perturbation std"
    paths = []
    for level in train_levels:
        series = {
            label: [(test, acc) for train, test, acc in rows if train == level] for label, rows in curves.items()
        }
        svg = line_chart(series, f"{noun} in training set: {_label(level)}", x_label=f"{noun.lower()} in test set")
        path = out_dir / f"{mode}_train_{_label(level)}.svg"
        path.write_text(svg)
        paths.append(path)
    return paths
