"""Raster overlays of waypoints and coverage paths on top of an occupancy grid."""
import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo

from cropway.config import to_jsonable
from cropway.fieldgen import WaypointSet
from cropway.planner import CoveragePath

__all__ = ["ROW_COLOR", "FREE_COLOR", "CLUSTER_COLORS", "PATH_COLOR", "render_overlay", "save_overlay"]

Color = Tuple[int, int, int]

FREE_COLOR: Color = (255, 255, 255)
ROW_COLOR: Color = (150, 150, 150)
CLUSTER_COLORS: Dict[int, Color] = {0: (220, 30, 30), 1: (30, 60, 220)}
UNLABELED_COLOR: Color = (240, 170, 0)
PATH_COLOR: Color = (20, 160, 60)

MARKER_RADIUS = 3


def render_overlay(
    grid: np.ndarray,
    waypoints: Optional[WaypointSet] = None,
    path: Optional[CoveragePath] = None,
) -> Image.Image:
    """RGB image the size of ``grid``: rows in gray, path in green, cluster A red, cluster B blue."""
    occupied = np.asarray(grid) > 0
    canvas = np.empty(occupied.shape + (3,), dtype=np.uint8)
    canvas[...] = FREE_COLOR
    canvas[occupied] = ROW_COLOR
    image = Image.fromarray(canvas)
    draw = ImageDraw.Draw(image)

    if path is not None and len(path.points) > 1:
        draw.line([(float(x), float(y)) for x, y in path.points], fill=PATH_COLOR, width=2)
    if waypoints is not None:
        for (x, y), label in zip(waypoints.points, waypoints.labels):
            color = CLUSTER_COLORS.get(int(label), UNLABELED_COLOR)
            r = MARKER_RADIUS
            draw.ellipse([x - r, y - r, x + r, y + r], fill=color)
    return image


def save_overlay(image: Image.Image, path: Union[str, Path], run_config: Optional[Dict[str, Any]] = None) -> Path:
    """Write the overlay as PNG with the run config in a ``run_config`` text chunk."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    info = PngInfo()
    if run_config is not None:
        info.add_text("run_config", json.dumps(to_jsonable(run_config), sort_keys=True))
    image.save(path, format="PNG", pnginfo=info)
    return path
