"""H2DiLR - homogeneity-heterogeneity disentangled learning for neural representations."""
