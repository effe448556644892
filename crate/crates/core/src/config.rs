use thiserror::Error;

/// Shape parameters of a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeConfig {
    /// Maximum children per internal node (K). Internal nodes hold at most
    /// `order - 1` separators.
    pub order: usize,
    /// Slots per leaf (D).
    pub leaf_capacity: usize,
    /// Leaves holding fewer than `min_size` keys are merged or refilled (S).
    pub min_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("order K = {0} must be at least 3")]
    Order(usize),
    #[error("leaf capacity D = {0} must be at least 4")]
    LeafCapacity(usize),
    #[error("minimum size S = {min_size} must lie in [2; D/2] for D = {leaf_capacity}")]
    MinSize { min_size: usize, leaf_capacity: usize },
}

impl TreeConfig {
    pub fn new(order: usize, leaf_capacity: usize, min_size: usize) -> Result<TreeConfig, ConfigError> {
        let config = TreeConfig { order, leaf_capacity, min_size };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.order < 3 {
            return Err(ConfigError::Order(self.order));
        }
        if self.leaf_capacity < 4 {
            return Err(ConfigError::LeafCapacity(self.leaf_capacity));
        }
        if self.min_size < 2 || self.min_size > self.leaf_capacity / 2 {
            return Err(ConfigError::MinSize {
                min_size: self.min_size,
                leaf_capacity: self.leaf_capacity,
            });
        }
        debug_assert!(self.balanced_lower() <= self.balanced_upper());
        Ok(())
    }

    /// Smallest size of a leaf produced by a split, merge or redistribution:
    /// `min(2S, D/2)`.
    pub fn balanced_lower(&self) -> usize {
        (2 * self.min_size).min(self.leaf_capacity / 2)
    }

    /// Largest size of a leaf produced by a rebalance: `D - 1`.
    pub fn balanced_upper(&self) -> usize {
        self.leaf_capacity - 1
    }

    /// Internal nodes (other than the root's child) with fewer children are
    /// merged with a sibling.
    pub fn internal_min_children(&self) -> usize {
        self.min_size.min(self.order.div_ceil(2))
    }
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig { order: 32, leaf_capacity: 32, min_size: 8 }
    }
}
