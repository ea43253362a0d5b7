"""Step through prototype aggregation on a hand-sized episode.

Two categories plus background, four query positions, width 4.  Position 0
resembles category 0, position 1 resembles category 1, and the last two are
featureless, so their matching coefficients come out uniform.
"""

import numpy as np

from mmfsod.aggregation import (aggregate, feature_matching_coefficients, foreground_filter,
                                init_task_prototypes, task_encoding)

np.set_printoptions(precision=3, suppress=True)

S = np.array([[2.0, 0.0, 0.0, 0.0],   # category 0
              [0.0, 2.0, 0.0, 0.0],   # category 1
              [0.0, 0.0, 0.0, 0.0]])  # background
Q = np.array([[1.5, 0.1, 0.3, 0.0],
              [0.0, 1.8, 0.0, 0.2],
              [0.0, 0.0, 0.0, 0.0],
              [0.0, 0.0, 0.7, -0.4]])
T = init_task_prototypes(3, 4).numpy()

A = feature_matching_coefficients(Q, S).numpy()
print("matching coefficients (rows: query positions, cols: cat0 cat1 bg)")
print(A)
print("\nforeground-filtered query features")
print(foreground_filter(A, S, Q).numpy())
print("\ntask encodings: a coefficient-weighted mix of the sinusoidal task rows")
print(task_encoding(A, T).numpy())
print("\naggregated features handed to the detection head")
print(aggregate(Q, S, T).numpy())
