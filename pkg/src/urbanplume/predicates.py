"""Robust 2D orientation and in-circle predicates.

Floating-point evaluation with a forward error bound; when the result is
too close to zero to trust, the determinant sign is recomputed exactly with
rational arithmetic (binary floats are exact dyadic rationals, so the
Fraction fallback is exact).  Mesh refinement is unstable under predicate
sign errors, which is why the filtered path exists at all.
"""

from __future__ import annotations

from fractions import Fraction

_EPS = 2.0 ** -53
_CCW_BOUND = (3.0 + 16.0 * _EPS) * _EPS
_ICC_BOUND = (10.0 + 96.0 * _EPS) * _EPS


def orient2d(ax, ay, bx, by, cx, cy) -> int:
    """Sign of twice the signed area of triangle (a, b, c).

    +1 for counter-clockwise, -1 for clockwise, 0 for exactly collinear.
    """
    detleft = (ax - cx) * (by - cy)
    detright = (ay - cy) * (bx - cx)
    det = detleft - detright
    detsum = abs(detleft) + abs(detright)
    if abs(det) > _CCW_BOUND * detsum:
        return 1 if det > 0.0 else -1
    return _orient2d_exact(ax, ay, bx, by, cx, cy)


def _orient2d_exact(ax, ay, bx, by, cx, cy) -> int:
    det = (Fraction(ax) - Fraction(cx)) * (Fraction(by) - Fraction(cy)) \
        - (Fraction(ay) - Fraction(cy)) * (Fraction(bx) - Fraction(cx))
    if det > 0:
        return 1
    if det < 0:
        return -1
    return 0


def incircle(ax, ay, bx, by, cx, cy, dx, dy) -> int:
    """Sign test: is d inside the circumcircle of CCW triangle (a, b, c)?

    +1 strictly inside, -1 strictly outside, 0 exactly cocircular.  The
    triangle must be counter-clockwise for the sign convention to hold.
    """
    adx = ax - dx
    ady = ay - dy
    bdx = bx - dx
    bdy = by - dy
    cdx = cx - dx
    cdy = cy - dy

    bdxcdy = bdx * cdy
    cdxbdy = cdx * bdy
    alift = adx * adx + ady * ady

    cdxady = cdx * ady
    adxcdy = adx * cdy
    blift = bdx * bdx + bdy * bdy

    adxbdy = adx * bdy
    bdxady = bdx * ady
    clift = cdx * cdx + cdy * cdy

    det = alift * (bdxcdy - cdxbdy) \
        + blift * (cdxady - adxcdy) \
        + clift * (adxbdy - bdxady)

    permanent = (abs(bdxcdy) + abs(cdxbdy)) * alift \
        + (abs(cdxady) + abs(adxcdy)) * blift \
        + (abs(adxbdy) + abs(bdxady)) * clift
    if abs(det) > _ICC_BOUND * permanent:
        return 1 if det > 0.0 else -1
    return _incircle_exact(ax, ay, bx, by, cx, cy, dx, dy)


def _incircle_exact(ax, ay, bx, by, cx, cy, dx, dy) -> int:
    adx = Fraction(ax) - Fraction(dx)
    ady = Fraction(ay) - Fraction(dy)
    bdx = Fraction(bx) - Fraction(dx)
    bdy = Fraction(by) - Fraction(dy)
    cdx = Fraction(cx) - Fraction(dx)
    cdy = Fraction(cy) - Fraction(dy)
    det = (adx * adx + ady * ady) * (bdx * cdy - cdx * bdy) \
        + (bdx * bdx + bdy * bdy) * (cdx * ady - adx * cdy) \
        + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady)
    if det > 0:
        return 1
    if det < 0:
        return -1
    return 0
