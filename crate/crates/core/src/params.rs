//! Named, grouped parameter storage shared by all modules of a network.

use ndarray::ArrayD;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub group: String,
    pub name: String,
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// Flat store of every learnable array, addressed by id and organized into
/// named groups (one group per architectural module).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: &str, name: &str, value: ArrayD<f64>) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            group: group.to_string(),
            name: name.to_string(),
            value,
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.params[id.0].trainable = flag;
    }

    /// Mark every parameter of a group (un)trainable. Idempotent.
    pub fn set_group_trainable(&mut self, group: &str, flag: bool) {
        for p in &mut self.params {
            if p.group == group {
                p.trainable = flag;
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn group_ids(&self, group: &str) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].group == group)
            .map(ParamId)
            .collect()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for p in &self.params {
            if !seen.contains(&p.group) {
                seen.push(p.group.clone());
            }
        }
        seen
    }

    /// Ids of trainable parameters in any of `groups`.
    pub fn trainable_in(&self, groups: &[&str]) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| {
                self.params[i].trainable && groups.contains(&self.params[i].group.as_str())
            })
            .map(ParamId)
            .collect()
    }

    /// FNV-1a over the exact bit patterns of a group's values. Equal iff the
    /// parameters are bit-identical.
    pub fn checksum_group(&self, group: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            if p.group != group {
                continue;
            }
            for b in p.name.as_bytes() {
                h = (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in p.value.iter() {
                for b in v.to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Checksum over every group, in group order.
    pub fn checksum_all(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for g in self.groups() {
            h ^= self.checksum_group(&g).rotate_left(17);
        }
        h
    }
}
