"""Regenerate the bundled idealized 10-10 montage and the 54-channel site list.

Electrode positions live on a unit sphere (+x right, +y front, +z up).
The outer ring sits 72 degrees from the vertex; inner rows are placed on
the circular arc through (left outer, midline, right outer) at the usual
eighth-fraction slots.  This is an idealized stand-in layout, not a
digitized cap.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

RING_POLAR_DEG = 72.0

# azimuth from the nasion, positive to the right
RING = {
    "Fpz": 0, "Fp2": 18, "AF8": 36, "F8": 54, "FT8": 72, "T8": 90,
    "TP8": 108, "P8": 126, "PO8": 144, "O2": 162, "Oz": 180,
    "O1": -162, "PO7": -144, "P7": -126, "TP7": -108, "T7": -90,
    "FT7": -72, "F7": -54, "AF7": -36, "Fp1": -18,
}

# midline electrodes between Fpz and Oz, as polar angle from vertex
# (positive toward the nasion)
MIDLINE = {
    "AFz": 54, "Fz": 36, "FCz": 18, "Cz": 0, "CPz": -18, "Pz": -36,
    "POz": -54,
}

# per row: (left ring label, midline label, right ring label,
#           {inner label: slot}) with slots in eighths of the full arc
ROWS = [
    ("AF7", "AFz", "AF8", {"AF3": 2, "AF4": 6}),
    ("F7", "Fz", "F8", {"F5": 1, "F3": 2, "F1": 3, "F2": 5, "F4": 6, "F6": 7}),
    ("FT7", "FCz", "FT8",
     {"FC5": 1, "FC3": 2, "FC1": 3, "FC2": 5, "FC4": 6, "FC6": 7}),
    ("T7", "Cz", "T8", {"C5": 1, "C3": 2, "C1": 3, "C2": 5, "C4": 6, "C6": 7}),
    ("TP7", "CPz", "TP8",
     {"CP5": 1, "CP3": 2, "CP1": 3, "CP2": 5, "CP4": 6, "CP6": 7}),
    ("P7", "Pz", "P8", {"P5": 1, "P3": 2, "P1": 3, "P2": 5, "P4": 6, "P6": 7}),
    ("PO7", "POz", "PO8", {"PO3": 2, "PO4": 6}),
]

# lowest ring, 90 degrees from the vertex
EQUATOR = {"P9": 126, "P10": -126, "Iz": 180}

# channels not shared by every acquisition site in the bundled layout
NOT_COMMON = ["Iz", "P9", "P10", "F5", "F6", "C5", "C6", "P5", "P6", "CP6"]


def _on_sphere(polar_deg: float, azimuth_deg: float) -> np.ndarray:
    th = np.deg2rad(polar_deg)
    az = np.deg2rad(azimuth_deg)
    return np.array([np.sin(th) * np.sin(az), np.sin(th) * np.cos(az), np.cos(th)])


def _arc_points(left: np.ndarray, mid: np.ndarray, right: np.ndarray,
                slots: dict[str, int]) -> dict[str, np.ndarray]:
    """Points at eighth-fractions of the spherical circle through three points."""
    # circumcenter of the three points (lies in their common plane)
    a, b, c = left, mid, right
    ab, ac = b - a, c - a
    n = np.cross(ab, ac)
    # solve for center = a + s*ab + t*ac with |center-a| = |center-b| = |center-c|
    m = np.array([ab, ac, n])
    rhs = np.array([ab @ ab / 2.0, ac @ ac / 2.0, 0.0])
    center = a + np.linalg.solve(m, rhs)
    r = np.linalg.norm(a - center)
    u = (a - center) / r
    w = np.cross(n / np.linalg.norm(n), u)
    ang_c = np.arctan2((c - center) @ w, (c - center) @ u) % (2 * np.pi)
    out = {}
    for name, slot in slots.items():
        ang = ang_c * slot / 8.0
        out[name] = center + r * (np.cos(ang) * u + np.sin(ang) * w)
    return out


def build_positions() -> dict[str, list[float]]:
    pos: dict[str, np.ndarray] = {}
    for name, az in RING.items():
        pos[name] = _on_sphere(RING_POLAR_DEG, az)
    for name, polar in MIDLINE.items():
        pos[name] = _on_sphere(abs(polar), 0.0 if polar >= 0 else 180.0)
    for name, az in EQUATOR.items():
        pos[name] = _on_sphere(90.0, az)
    for left, mid, right, inner in ROWS:
        pos.update(_arc_points(pos[left], pos[mid], pos[right], inner))
    for name, p in pos.items():
        assert abs(np.linalg.norm(p) - 1.0) < 1e-9, name
    return {k: [round(v, 12) for v in p] for k, p in pos.items()}


def main() -> None:
    assets = Path(__file__).resolve().parents[1] / "src" / "eegpolicy" / "assets"
    assets.mkdir(parents=True, exist_ok=True)
    positions = build_positions()
    with open(assets / "montage_10_10.json", "w") as fh:
        json.dump(positions, fh, indent=1, sort_keys=True)
        fh.write("\n")
    common = [name for name in sorted(positions) if name not in NOT_COMMON]
    assert len(common) == 54, len(common)
    (assets / "common_channels_54.txt").write_text("\n".join(common) + "\n")
    print(f"wrote {len(positions)} positions, {len(common)} common channels")


if __name__ == "__main__":
    main()
