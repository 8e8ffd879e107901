use std::collections::HashMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::norm::BnConfig;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub learnable: bool,
}

/// Ordered registry of named tensors: learnable weights plus buffers such as
/// batch-norm running statistics. Iteration follows insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleParams<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ModuleParams<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ModuleParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, learnable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            learnable,
        });
        Ok(())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.entries[i].tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn learnable(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter().filter(|e| e.learnable)
    }

    /// Number of learnable scalars.
    pub fn count_learnable(&self) -> usize {
        self.learnable().map(|e| e.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModuleParams<U> {
        ModuleParams {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    learnable: e.learnable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradients in registry order.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Euclidean norm over the parameters whose name starts with `prefix`.
    pub fn norm_with_prefix(&self, prefix: &str) -> f64 {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// A forward pass in progress: a tape plus the parameters it reads.
///
/// Parameters are copied onto the tape the first time a layer asks for them,
/// so a weight used in several places accumulates all of its gradients.
pub struct Graph<'p, T: Scalar> {
    pub tape: Tape<T>,
    params: &'p mut ModuleParams<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    bn: BnConfig,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p mut ModuleParams<T>, training: bool) -> Self {
        Self::with_tape(Tape::new(), params, training)
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(tape: Tape<T>, params: &'p mut ModuleParams<T>, training: bool) -> Self {
        let n = params.len();
        Self {
            tape,
            params,
            bound: vec![None; n],
            training,
            bn: BnConfig {
                training,
                ..BnConfig::default()
            },
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &ModuleParams<T> {
        self.params
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Makes every later read of `name` return `v` instead of a fresh leaf.
    pub fn bind_param(&mut self, name: &str, v: Var) -> Result<()> {
        let i = self
            .params
            .position(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        self.bound[i] = Some(v);
        Ok(())
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .position(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let entry = &self.params.entries[i];
        let v = self.tape.leaf(entry.tensor.clone(), entry.learnable);
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Batch norm using `{prefix}.gamma`, `{prefix}.beta` and the running
    /// statistics `{prefix}.running_mean` / `{prefix}.running_var`.
    pub fn batchnorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let mut mean = self.params.get(&mean_name)?.data().to_vec();
        let mut var = self.params.get(&var_name)?.data().to_vec();
        let y = self.tape.batchnorm2d(x, gamma, beta, &mut mean, &mut var, self.bn)?;
        if self.training {
            self.params.get_mut(&mean_name)?.data_mut().copy_from_slice(&mean);
            self.params.get_mut(&var_name)?.data_mut().copy_from_slice(&var);
        }
        Ok(y)
    }

    /// Differentiates `root` and collects gradients for every learnable
    /// parameter read during the pass. Parameters that did not influence
    /// `root` receive zeros; parameters never read are absent.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        self.tape.backward(root)?;
        let entries = self
            .params
            .entries
            .iter()
            .zip(&self.bound)
            .filter(|(e, _)| e.learnable)
            .filter_map(|(e, v)| v.map(|v| (e.name.clone(), self.tape.grad_or_zeros(v))))
            .collect();
        Ok(Gradients { entries })
    }
}
