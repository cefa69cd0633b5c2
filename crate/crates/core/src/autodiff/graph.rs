//! Reverse-mode traversal.

use std::collections::{HashMap, HashSet};

use super::ops::backward_rule;
use super::Tensor;
use crate::error::{Error, Result};

/// Gradients keyed by tensor identity.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.by_id.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Nodes reachable from `root` through recorded ops, parents before children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !t.0.requires_grad || !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(f) = &t.0.grad_fn {
            for p in &f.parents {
                if p.0.requires_grad && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn accumulate(acc: &mut HashMap<usize, Tensor>, id: usize, g: Tensor) -> Result<()> {
    match acc.remove(&id) {
        Some(prev) => {
            acc.insert(id, prev.add(&g)?);
        }
        None => {
            acc.insert(id, g);
        }
    }
    Ok(())
}

/// Propagates from a scalar `output` and returns gradients for every node
/// accepted by `want`. Only nodes that depend on a wanted node are visited.
fn propagate(output: &Tensor, want: &dyn Fn(&Tensor) -> bool, create_graph: bool) -> Result<Gradients> {
    if output.shape() != [1, 1] {
        return Err(Error::NonScalarLoss(output.shape().to_vec()));
    }
    let order = topo_order(output);
    // relevant = wanted or depends on something wanted
    let mut relevant: HashSet<usize> = HashSet::new();
    for t in &order {
        let dep = want(t)
            || t.0.grad_fn.as_ref().is_some_and(|f| f.parents.iter().any(|p| relevant.contains(&p.id())));
        if dep {
            relevant.insert(t.id());
        }
    }
    let mut acc: HashMap<usize, Tensor> = HashMap::new();
    let mut result = Gradients::default();
    if !relevant.contains(&output.id()) {
        return Ok(result);
    }
    let mut seed = Tensor::scalar(1.0);
    if output.is_low_precision() {
        seed = seed.with_precision(super::Precision::F32);
    }
    acc.insert(output.id(), seed);

    for t in order.iter().rev() {
        let Some(g) = acc.remove(&t.id()) else { continue };
        if want(t) {
            result.by_id.insert(t.id(), g.clone());
        }
        let Some(f) = &t.0.grad_fn else { continue };
        if !f.parents.iter().any(|p| relevant.contains(&p.id())) {
            continue;
        }
        let grads = if create_graph {
            backward_rule(&f.op, &f.parents, t, &g)?
        } else {
            let parents: Vec<Tensor> = f.parents.iter().map(Tensor::detach).collect();
            backward_rule(&f.op, &parents, &t.detach(), &g.detach())?
        };
        for (p, pg) in f.parents.iter().zip(grads) {
            if relevant.contains(&p.id()) {
                accumulate(&mut acc, p.id(), pg)?;
            }
        }
    }
    Ok(result)
}

/// Gradients of a scalar loss with respect to every leaf that requires grad.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    propagate(loss, &|t| t.0.grad_fn.is_none() && t.0.requires_grad, false)
}

/// [`backward`], plus explicit zero gradients for parameters in `store` the
/// loss does not depend on (a constant offset in a potential, say).
pub fn backward_params(loss: &Tensor, store: &super::ParameterStore) -> Result<Gradients> {
    let mut g = backward(loss)?;
    for (_, p) in store.iter() {
        g.by_id.entry(p.id()).or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
    }
    Ok(g)
}

/// Gradients of a scalar `output` with respect to `inputs`.
///
/// With `create_graph` the returned tensors are themselves differentiable
/// functions of everything `output` depended on. Inputs that do not influence
/// `output` get a zero gradient.
pub fn grad(output: &Tensor, inputs: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    let ids: HashSet<usize> = inputs.iter().map(|t| t.id()).collect();
    let grads = propagate(output, &|t| ids.contains(&t.id()), create_graph)?;
    Ok(inputs
        .iter()
        .map(|x| {
            grads
                .get(x)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()))
        })
        .collect())
}
