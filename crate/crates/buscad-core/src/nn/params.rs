use super::tape::Arr;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct ParamEntry {
    pub name: String,
    pub value: Arr,
    pub trainable: bool,
}

/// Named tensors of one network. Trainable entries receive optimizer
/// updates; buffers (batch-norm running statistics) are carried along and
/// checkpointed but never stepped.
#[derive(Default)]
pub struct ParamStore {
    pub(crate) entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Arr, trainable: bool) -> ParamId {
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Arr {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Overwrite every entry from `(name, value)` pairs; the sets of
    /// names and the shapes must match exactly.
    pub fn fill_from<'a>(
        &mut self,
        mut values: impl FnMut(&str) -> Option<&'a Arr>,
    ) -> Result<(), String> {
        for e in &mut self.entries {
            let v = values(&e.name).ok_or_else(|| format!("missing parameter {}", e.name))?;
            if v.shape() != e.value.shape() {
                return Err(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    e.name,
                    v.shape(),
                    e.value.shape()
                ));
            }
            e.value = v.clone();
        }
        Ok(())
    }
}
