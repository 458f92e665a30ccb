"""Procedural SVG face glyph driven by oracle read-outs.

The glyph visualizes what the world "sees" in a latent: attribute 0 sets
face width and wrinkle count, 1 the mouth curvature, 2 the eye openness,
3 the brow angle, 4 the brow furrow. Identity components pick the fill hue
and the outline squash, so two latents that differ only in identity share
every attribute-driven path parameter. All numbers are formatted with six
decimals, which makes equal inputs produce byte-identical documents.
"""

from __future__ import annotations

import numpy as np

from .world import World, read_attributes, read_identity

# Documented endpoint: at smile = 1 the quadratic mouth control offset
# reaches +MOUTH_CURVATURE_MAX, at smile = 0 it is -MOUTH_CURVATURE_MAX.
MOUTH_CURVATURE_MAX = 22.0
FACE_WIDTH_MIN = 52.0
FACE_WIDTH_MAX = 92.0
EYE_OPEN_MAX = 13.0
BROW_ANGLE_MAX = 24.0

_F = "{:.6f}".format


def _attr(attrs: np.ndarray, i: int) -> float:
    """Attribute i, or the neutral midpoint when the world has fewer."""
    return float(attrs[i]) if i < len(attrs) else 0.5


def render(world: World, latent: np.ndarray, prompt_class: int) -> str:
    """Render a latent as an SVG 1.1 document string."""
    attrs = read_attributes(world, latent, prompt_class)
    ident = read_identity(world, latent, prompt_class)

    width = _attr(attrs, 0)
    smile = _attr(attrs, 1)
    eyes = _attr(attrs, 2)
    brow = _attr(attrs, 3)
    furrow = _attr(attrs, 4)

    hue = (float(ident[0]) + 1.0) / 2.0 * 360.0
    squash = 1.0 + 0.15 * float(ident[1]) if len(ident) > 1 else 1.0
    stroke = 2.0 + 0.8 * (float(ident[2]) + 1.0) / 2.0 if len(ident) > 2 else 2.4
    bg_hue = (prompt_class * 360.0 / max(1, world.spec.n_prompt_classes)) % 360.0

    cx, cy = 100.0, 100.0
    face_rx = FACE_WIDTH_MIN + (FACE_WIDTH_MAX - FACE_WIDTH_MIN) * width
    face_ry = 78.0 * squash
    n_wrinkles = int(round(width * 4.0))
    mouth_curv = MOUTH_CURVATURE_MAX * (2.0 * smile - 1.0)
    eye_ry = 1.5 + EYE_OPEN_MAX * eyes
    brow_angle = BROW_ANGLE_MAX * (2.0 * brow - 1.0)
    furrow_depth = furrow

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="200" height="200" '
        'viewBox="0 0 200 200" '
        f'data-face-width="{_F(face_rx)}" data-wrinkles="{n_wrinkles}" '
        f'data-mouth-curvature="{_F(mouth_curv)}" data-eye-openness="{_F(eye_ry)}" '
        f'data-brow-angle="{_F(brow_angle)}" data-brow-furrow="{_F(furrow_depth)}" '
        f'data-hue="{_F(hue)}" data-outline-squash="{_F(squash)}">',
        f'<rect width="200" height="200" fill="hsl({_F(bg_hue)},30%,92%)"/>',
        f'<ellipse cx="{_F(cx)}" cy="{_F(cy)}" rx="{_F(face_rx)}" ry="{_F(face_ry)}" '
        f'fill="hsl({_F(hue)},55%,75%)" stroke="#333" stroke-width="{_F(stroke)}"/>',
    ]

    # Forehead wrinkles: short arcs stacked above the brows.
    for k in range(n_wrinkles):
        y = cy - 52.0 + 6.0 * k
        parts.append(
            f'<path d="M {_F(cx - 24.0)} {_F(y)} Q {_F(cx)} {_F(y - 4.0)} {_F(cx + 24.0)} {_F(y)}" '
            'fill="none" stroke="#555" stroke-width="1.200000"/>'
        )

    for side in (-1.0, 1.0):
        ex = cx + side * 30.0
        ey = cy - 18.0
        parts.append(
            f'<ellipse cx="{_F(ex)}" cy="{_F(ey)}" rx="11.000000" ry="{_F(eye_ry)}" '
            'fill="#fff" stroke="#333" stroke-width="1.600000"/>'
        )
        parts.append(f'<circle cx="{_F(ex)}" cy="{_F(ey)}" r="3.200000" fill="#222"/>')
        bx = ex
        by = ey - 16.0
        parts.append(
            f'<g transform="rotate({_F(side * brow_angle)} {_F(bx)} {_F(by)})">'
            f'<line x1="{_F(bx - 13.0)}" y1="{_F(by)}" x2="{_F(bx + 13.0)}" y2="{_F(by)}" '
            'stroke="#222" stroke-width="3.000000"/></g>'
        )

    # Brow furrow: vertical creases between the brows, scaled by depth.
    if furrow_depth > 0.0:
        for k, dx in enumerate((-4.0, 4.0)):
            parts.append(
                f'<line x1="{_F(cx + dx)}" y1="{_F(cy - 40.0)}" x2="{_F(cx + dx)}" '
                f'y2="{_F(cy - 40.0 + 12.0 * furrow_depth)}" stroke="#444" '
                f'stroke-width="{_F(0.5 + 1.5 * furrow_depth)}"/>'
            )

    my = cy + 38.0
    parts.append(
        f'<path d="M {_F(cx - 34.0)} {_F(my)} Q {_F(cx)} {_F(my + mouth_curv)} '
        f'{_F(cx + 34.0)} {_F(my)}" fill="none" stroke="#222" stroke-width="3.200000"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts)
