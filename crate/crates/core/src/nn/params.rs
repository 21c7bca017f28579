use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsId(pub usize);

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Feature generators and classifier heads.
    Classifier,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamMeta {
    pub name: String,
    pub group: Group,
}

/// Batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Owns every trainable tensor and every running statistic of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    meta: Vec<ParamMeta>,
    values: Vec<Tensor>,
    stats: Vec<RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: Group) -> ParamId {
        self.meta.push(ParamMeta {
            name: name.into(),
            group,
        });
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(RunningStats {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.meta[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn group_ids(&self, group: Group) -> Vec<ParamId> {
        self.ids().filter(|&id| self.meta[id.0].group == group).collect()
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    /// Folds a batch estimate into the running statistics.
    pub fn update_stats(&mut self, id: StatsId, mean: &[f64], var: &[f64], momentum: f64) {
        let s = &mut self.stats[id.0];
        for (r, &m) in s.mean.iter_mut().zip(mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, &v) in s.var.iter_mut().zip(var) {
            *r = momentum * *r + (1.0 - momentum) * v;
        }
    }
}
