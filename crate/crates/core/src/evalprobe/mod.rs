//! Representation probes and rollout statistics: ridge regression onto ground
//! truth, cluster purity, and mean-return summaries.
