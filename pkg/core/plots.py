"""
Gráficos SVG escritos à mão (polyline + texto dos eixos).

A única linha que muda entre execuções iguais é o comentário com o
carimbo temporal, logo a seguir à abertura do <svg>.
"""
import logging
from html import escape
from pathlib import Path

import numpy as np
from django.utils import timezone

from .interpretability import CuiCurve

logger = logging.getLogger(__name__)

WIDTH, HEIGHT = 720, 400
MARGIN = {'left': 70, 'right': 70, 'top': 40, 'bottom': 90}
PALETTE = ['#1f77b4', '#d62728', '#2ca02c', '#9467bd', '#ff7f0e', '#8c564b', '#e377c2', '#17becf']


def _open(title: str, timestamp: str | None) -> list[str]:
    stamp = timestamp or timezone.now().isoformat(timespec='seconds')
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<!-- generated: {escape(stamp)} -->',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]


def _plot_box() -> tuple[float, float, float, float]:
    return MARGIN['left'], MARGIN['top'], WIDTH - MARGIN['right'], HEIGHT - MARGIN['bottom']


def _scale(value: float, low: float, high: float, out_low: float, out_high: float) -> float:
    if high == low:
        return (out_low + out_high) / 2
    return out_low + (value - low) / (high - low) * (out_high - out_low)


def _axes(x_labels: list[str], y_low: float, y_high: float, y_title: str,
          right: tuple[float, float, str] | None = None) -> list[str]:
    left, top, right_edge, bottom = _plot_box()
    parts = [
        f'<line x1="{left}" y1="{bottom}" x2="{right_edge}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<text x="18" y="{(top + bottom) / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(top + bottom) / 2:.2f})">{escape(y_title)}</text>',
    ]
    for tick in np.linspace(y_low, y_high, 5):
        y = _scale(tick, y_low, y_high, bottom, top)
        parts.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{tick:.3g}</text>')
    for position, label in enumerate(x_labels):
        x = _x(position, len(x_labels))
        parts.append(
            f'<text x="{x:.2f}" y="{bottom + 12}" text-anchor="end" '
            f'transform="rotate(-45 {x:.2f} {bottom + 12})">{escape(label)}</text>'
        )
    if right is not None:
        r_low, r_high, r_title = right
        parts.append(f'<line x1="{right_edge}" y1="{top}" x2="{right_edge}" y2="{bottom}" stroke="black"/>')
        for tick in np.linspace(r_low, r_high, 5):
            y = _scale(tick, r_low, r_high, bottom, top)
            parts.append(f'<text x="{right_edge + 6}" y="{y + 4:.2f}">{tick:.3g}</text>')
        parts.append(
            f'<text x="{WIDTH - 14}" y="{(top + bottom) / 2:.2f}" text-anchor="middle" '
            f'transform="rotate(90 {WIDTH - 14} {(top + bottom) / 2:.2f})">{escape(r_title)}</text>'
        )
    return parts


def _x(position: int, count: int) -> float:
    left, _, right_edge, _ = _plot_box()
    return _scale(position, 0, max(count - 1, 1), left + 10, right_edge - 10)


def _polyline(points: list[tuple[float, float]], color: str, dashed: bool = False) -> str:
    coords = ' '.join(f'{x:.2f},{y:.2f}' for x, y in points)
    dash = ' stroke-dasharray="6,4"' if dashed else ''
    return f'<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{coords}"/>'


def _legend(entries: list[tuple[str, str, bool]]) -> list[str]:
    parts, x = [], MARGIN['left']
    for label, color, dashed in entries:
        dash = ' stroke-dasharray="6,4"' if dashed else ''
        parts.append(f'<line x1="{x}" y1="{HEIGHT - 12}" x2="{x + 20}" y2="{HEIGHT - 12}" '
                     f'stroke="{color}" stroke-width="2"{dash}/>')
        parts.append(f'<text x="{x + 24}" y="{HEIGHT - 8}">{escape(label)}</text>')
        x += 30 + 7 * len(label)
    return parts


def cui_plot(curve: CuiCurve, candidates=(), accuracies: dict | None = None,
             title: str = 'CUI por camada', timestamp: str | None = None) -> str:
    """
    Curva CUI (eixo esquerdo) com marcadores nos candidatos e, se houver,
    a exatidão após a divisão a tracejado (eixo direito, [0, 1]).
    """
    layers = curve.layers()
    values = [curve.values[layer] for layer in layers]
    _, top, _, bottom = _plot_box()
    high = max(values) if values and max(values) > 0 else 1.0
    parts = _open(title, timestamp)
    right = (0.0, 1.0, 'exatidão') if accuracies else None
    parts += _axes([curve.layer_names[layer] for layer in layers], 0.0, high, f'CUI ({curve.reduction})', right)

    points = [(_x(i, len(layers)), _scale(v, 0.0, high, bottom, top)) for i, v in enumerate(values)]
    parts.append(_polyline(points, PALETTE[0]))
    for position, layer in enumerate(layers):
        if layer in candidates:
            x, y = points[position]
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="5" fill="{PALETTE[1]}"/>')
    legend = [('CUI', PALETTE[0], False)]
    if accuracies:
        measured = [(i, accuracies[layer]) for i, layer in enumerate(layers)
                    if accuracies.get(layer) is not None]
        dashed = [(_x(i, len(layers)), _scale(a, 0.0, 1.0, bottom, top)) for i, a in measured]
        parts.append(_polyline(dashed, PALETTE[2], dashed=True))
        for x, y in dashed:
            parts.append(f'<rect x="{x - 3:.2f}" y="{y - 3:.2f}" width="6" height="6" fill="{PALETTE[2]}"/>')
        legend.append(('exatidão após divisão', PALETTE[2], True))
    parts += _legend(legend)
    parts.append('</svg>')
    return '\n'.join(parts) + '\n'


def overlay_plot(curves: dict[str, CuiCurve], title: str = 'Curvas normalizadas',
                 timestamp: str | None = None) -> str:
    """Várias curvas sobre as mesmas camadas, cada uma dividida pelo seu máximo."""
    first = next(iter(curves.values()))
    layers = first.layers()
    _, top, _, bottom = _plot_box()
    parts = _open(title, timestamp)
    parts += _axes([first.layer_names[layer] for layer in layers], 0.0, 1.0, 'valor / máximo')
    legend = []
    for position, (label, curve) in enumerate(curves.items()):
        values = np.array([curve.values.get(layer, 0.0) for layer in layers], dtype=np.float64)
        peak = values.max() if values.size and values.max() > 0 else 1.0
        color = PALETTE[position % len(PALETTE)]
        points = [(_x(i, len(layers)), _scale(v / peak, 0.0, 1.0, bottom, top)) for i, v in enumerate(values)]
        parts.append(_polyline(points, color, dashed=position % 2 == 1))
        legend.append((label, color, position % 2 == 1))
    parts += _legend(legend)
    parts.append('</svg>')
    return '\n'.join(parts) + '\n'


def box_plot(samples: dict[str, list[float]], title: str = 'Exatidão reamostrada',
             timestamp: str | None = None) -> str:
    """Caixa (Q1–Q3), mediana e bigodes (mín–máx) por rótulo."""
    labels = list(samples)
    everything = [v for values in samples.values() for v in values]
    low = min(everything) if everything else 0.0
    high = max(everything) if everything else 1.0
    if high == low:
        low, high = low - 0.05, high + 0.05
    _, top, _, bottom = _plot_box()
    parts = _open(title, timestamp)
    parts += _axes(labels, low, high, 'exatidão')
    for position, label in enumerate(labels):
        values = samples[label]
        if not values:
            continue
        q1, median, q3 = np.percentile(values, [25, 50, 75])
        x = _x(position, len(labels))
        y = {name: _scale(v, low, high, bottom, top)
             for name, v in (('min', min(values)), ('q1', q1), ('med', median), ('q3', q3), ('max', max(values)))}
        parts += [
            f'<line x1="{x:.2f}" y1="{y["min"]:.2f}" x2="{x:.2f}" y2="{y["max"]:.2f}" stroke="black"/>',
            f'<rect x="{x - 12:.2f}" y="{y["q3"]:.2f}" width="24" height="{y["q1"] - y["q3"]:.2f}" '
            f'fill="{PALETTE[0]}" fill-opacity="0.4" stroke="black"/>',
            f'<line x1="{x - 12:.2f}" y1="{y["med"]:.2f}" x2="{x + 12:.2f}" y2="{y["med"]:.2f}" '
            f'stroke="{PALETTE[1]}" stroke-width="2"/>',
        ]
    parts.append('</svg>')
    return '\n'.join(parts) + '\n'


def write_svg(svg: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding='utf-8')
    logger.debug(f"SVG gravado: {path}")
    return path
