"""
Trajectory error metrics by hand
================================
"""
import numpy as np

from repiln.evaluation import Trajectory, ate, empirical_cdf, integrate_trajectory, rte

t = np.arange(0, 120.5, 0.5)
truth = Trajectory(t, np.vstack([t, np.zeros_like(t)]))

# A constant 5 m offset is all absolute error and no relative error
shifted = Trajectory(t, truth.position + np.array([[3.0], [4.0]]))
print("offset:", ate(shifted, truth), rte(shifted, truth))

# A slow extra drift of 1 cm/s builds up 0.6 m over each 60 s interval
drifting = Trajectory(t, truth.position + np.array([[0.01], [0.0]]) * t)
print("drift: ", round(ate(drifting, truth), 4), round(rte(drifting, truth), 6))

# Dead reckoning: one velocity per interval between boundary times
v = np.tile([1.0, 0.0], (10, 1))
print(integrate_trajectory(np.arange(11.0), v).position[:, -1])

values, frac = empirical_cdf([0.4, 0.1, 0.25])
print([(float(v), float(f)) for v, f in zip(values, frac)])
