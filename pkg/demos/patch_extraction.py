"""
From a stained image to a bag of patches
========================================

Histopathology images are tiled into fixed-size patches on a regular grid.
Patches that are mostly white background are dropped. A patch is labelled
positive when a marked nucleus centre falls inside it. A synthetic image
stands in for a real slide here.
"""

import numpy as np

from distill_mil.data import (
    BREAST_PATCHES, COLON_PATCHES, extract_patches, image_to_bag, patch_grid, white_fraction,
)

# 500x500 colon images give an 18x18 grid of 27px patches, 896x768 breast images 28x24 of 32px
for name, shape, spec in (("colon", (500, 500), COLON_PATCHES), ("breast", (768, 896), BREAST_PATCHES)):
    rows, cols = patch_grid(shape, spec)
    print(name, "grid", len(rows), "x", len(cols), "=", len(rows) * len(cols))

rng = np.random.default_rng(0)
image = np.full((500, 500, 3), 250, np.uint8)  # white background
image[100:400, 50:300] = rng.integers(120, 200, size=(300, 250, 3))  # tissue
patches, coords = extract_patches(image, COLON_PATCHES, return_coords=True)
print("kept", len(patches), "of", 18 * 18, "patches")
print("white fraction of a kept patch", white_fraction(patches[0]))

centers = np.array([[60, 110], [200, 300], [480, 480]])  # (x, y); the last lies on background
bag = image_to_bag(image, 1, COLON_PATCHES, "synthetic", centers)
print("positive patches", int(bag.instance_labels.sum()), "of", len(bag))
