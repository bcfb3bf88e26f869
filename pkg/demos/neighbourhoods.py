"""How the adaptive neighbourhood size reacts to local shape.

Run with ``python3 demos/neighbourhoods.py``. Takes about a second.
"""

import numpy as np

from ascn import PointCloud, build_index, generate_shape, optimal_neighborhoods_all

rng = np.random.default_rng(0)

shapes = {
    "line": generate_shape("line", 300, 0.0003, 1.0, seed=1),
    "plane": generate_shape("plane", 300, 0.0003, 1.0, seed=2),
    "sphere": generate_shape("sphere", 300, 0.0003, 1.0, seed=3),
    "blob": PointCloud(rng.standard_normal((300, 3))),
}

# %% entropy curves: median over points for each candidate size M = 3..10
print(f"{'shape':<8}" + "".join(f"{'M=' + str(m):>7}" for m in range(3, 11)) + "   M* histogram")
for name, cloud in shapes.items():
    m_star, ent = optimal_neighborhoods_all(cloud, build_index(cloud))
    med = np.median(ent, axis=0)
    hist = np.bincount(m_star, minlength=11)[3:]
    print(f"{name:<8}" + "".join(f"{v:7.3f}" for v in med) + "   " + " ".join(str(h) for h in hist))

# A slightly noisy line sits near 0 and gets cleaner as M grows (the noise
# shrinks against the segment length), so it picks large M. Surfaces climb
# towards ln 2 = 0.693 and solid scatter towards ln 3 = 1.099; both mostly
# settle on small M.

# %% the same cloud scaled and rotated picks the same sizes
cloud = shapes["blob"]
q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
moved = PointCloud(cloud.points @ q.T * 7.5)
a, _ = optimal_neighborhoods_all(cloud, build_index(cloud))
b, _ = optimal_neighborhoods_all(moved, build_index(moved))
print("\nsame M* after rotating and scaling by 7.5:", bool(np.array_equal(a, b)))
