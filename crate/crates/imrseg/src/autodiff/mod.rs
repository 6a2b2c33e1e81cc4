//! Minimal reverse-mode automatic differentiation over dynamic-rank f64
//! tensors.
//!
//! The engine is a flat tape: every operation appends a node holding its
//! value and a backward closure that scatters the incoming gradient to its
//! parents. Node ids increase monotonically, so a single reverse sweep is a
//! valid topological order. Everything is deterministic: no hashing, no
//! threading, fixed iteration order.
//!
//! Only the operations the pipeline actually needs are implemented; heavy
//! kernels (convolutions, normalization, resampling, correlation) live in
//! [`kernels`].

pub mod kernels;

use ndarray::{ArrayD, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Handle to a parameter slot in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&Graph, NodeId, &Tensor, &mut GradSink)>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
    param: Option<usize>,
}

/// Gradient accumulator for one backward sweep.
pub struct GradSink {
    slots: Vec<Option<Tensor>>,
}

impl GradSink {
    fn new(n: usize) -> Self {
        GradSink { slots: (0..n).map(|_| None).collect() }
    }

    /// Accumulate `grad` into the slot for `id`.
    pub fn add(&mut self, id: NodeId, grad: Tensor) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += &grad,
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Gradients with respect to every parameter referenced by a graph.
pub struct Gradients {
    by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Gradients { by_param: (0..n_params).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }

    /// Accumulate another gradient set (e.g. across a mini-batch).
    pub fn merge(&mut self, other: Gradients) {
        for (mine, theirs) in self.by_param.iter_mut().zip(other.by_param) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => *a += &b,
                (None, Some(b)) => *mine = Some(b),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.by_param.iter_mut().flatten() {
            g.mapv_inplace(|v| v * k);
        }
    }
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        backward: Option<BackwardFn>,
        param: Option<usize>,
    ) -> NodeId {
        self.nodes.push(Node { value, backward, param });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, None, None)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::from_elem(IxDyn(&[]), v))
    }

    /// A leaf bound to a parameter slot; gradients land in
    /// [`Gradients::get`] under the same id.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), None, Some(id.0))
    }

    /// Reverse sweep from a scalar root. Returns per-parameter gradients.
    pub fn backward(&self, root: NodeId, n_params: usize) -> Gradients {
        assert!(
            self.nodes[root.0].value.len() == 1,
            "backward root must be scalar, got shape {:?}",
            self.nodes[root.0].value.shape()
        );
        let mut sink = GradSink::new(self.nodes.len());
        sink.add(root, Tensor::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));

        let mut grads = Gradients::empty(n_params);
        for i in (0..=root.0).rev() {
            let Some(g) = sink.slots[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(f) = &node.backward {
                f(self, NodeId(i), &g, &mut sink);
            }
            if let Some(p) = node.param {
                match &mut grads.by_param[p] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        grads
    }

    // ---- elementwise and structural ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            Some(Box::new(move |_, _, g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
            None,
        )
    }

    /// `a + k * b`, elementwise on identical shapes.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, k: f64) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add_scaled shape mismatch");
        let value = self.value(a) + &(self.value(b) * k);
        self.push(
            value,
            Some(Box::new(move |_, _, g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g * k);
            })),
            None,
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            Some(Box::new(move |graph, _, g, sink| {
                sink.add(a, g * graph.value(b));
                sink.add(b, g * graph.value(a));
            })),
            None,
        )
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let value = self.value(a).mapv(|v| scale * v + shift);
        self.push(
            value,
            Some(Box::new(move |_, _, g, sink| sink.add(a, g * scale))),
            None,
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(
            value,
            Some(Box::new(move |graph, me, g, sink| {
                let y = graph.value(me);
                sink.add(a, g * &y.mapv(|y| y * (1.0 - y)));
            })),
            None,
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(f64::tanh);
        self.push(
            value,
            Some(Box::new(move |graph, me, g, sink| {
                let y = graph.value(me);
                sink.add(a, g * &y.mapv(|y| 1.0 - y * y));
            })),
            None,
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(
            value,
            Some(Box::new(move |graph, _, g, sink| {
                let x = graph.value(a);
                sink.add(a, g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            })),
            None,
        )
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(gelu_exact);
        self.push(
            value,
            Some(Box::new(move |graph, _, g, sink| {
                let x = graph.value(a);
                sink.add(a, g * &x.mapv(gelu_grad));
            })),
            None,
        )
    }

    /// Concatenate along the last axis. All inputs share leading dims.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rank = self.value(parts[0]).ndim();
        let lead: Vec<usize> = self.value(parts[0]).shape()[..rank - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(&s[..rank - 1], &lead[..], "concat_last leading dims mismatch");
            widths.push(s[rank - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut shape = lead.clone();
        shape.push(total);
        let sites: usize = lead.iter().product();
        let mut data = vec![0.0; sites * total];
        for (k, &p) in parts.iter().enumerate() {
            let off: usize = widths[..k].iter().sum();
            let src = self.value(p).as_slice().expect("standard layout");
            let w = widths[k];
            for s in 0..sites {
                data[s * total + off..s * total + off + w]
                    .copy_from_slice(&src[s * w..(s + 1) * w]);
            }
        }
        let value = Tensor::from_shape_vec(IxDyn(&shape), data).unwrap();
        let parts = parts.to_vec();
        self.push(
            value,
            Some(Box::new(move |graph, _, g, sink| {
                let gs = g.as_slice().expect("standard layout");
                let mut off = 0;
                for &p in &parts {
                    let shape = graph.value(p).shape().to_vec();
                    let w = shape[shape.len() - 1];
                    let mut part = vec![0.0; sites * w];
                    for s in 0..sites {
                        part[s * w..(s + 1) * w]
                            .copy_from_slice(&gs[s * total + off..s * total + off + w]);
                    }
                    sink.add(p, Tensor::from_shape_vec(IxDyn(&shape), part).unwrap());
                    off += w;
                }
            })),
            None,
        )
    }

    /// Extract one channel of a (H, W, C) tensor as a (H, W) tensor.
    pub fn slice_channel(&mut self, a: NodeId, ch: usize) -> NodeId {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape.len(), 3, "slice_channel expects rank 3");
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        assert!(ch < c);
        let src = self.value(a).as_slice().expect("standard layout");
        let mut data = vec![0.0; h * w];
        for s in 0..h * w {
            data[s] = src[s * c + ch];
        }
        let value = Tensor::from_shape_vec(IxDyn(&[h, w]), data).unwrap();
        self.push(
            value,
            Some(Box::new(move |_, _, g, sink| {
                let gs = g.as_slice().expect("standard layout");
                let mut da = vec![0.0; h * w * c];
                for s in 0..h * w {
                    da[s * c + ch] = gs[s];
                }
                sink.add(a, Tensor::from_shape_vec(IxDyn(&[h, w, c]), da).unwrap());
            })),
            None,
        )
    }

    /// Reshape without moving data (free; backward reshapes the gradient).
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let old: Vec<usize> = self.value(a).shape().to_vec();
        assert_eq!(
            self.value(a).len(),
            shape.iter().product::<usize>(),
            "reshape length mismatch"
        );
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshape");
        self.push(
            value,
            Some(Box::new(move |_, _, g, sink| {
                sink.add(a, g.clone().into_shape_with_order(IxDyn(&old)).unwrap());
            })),
            None,
        )
    }

    /// Sum of all entries, as a 0-d scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let shape = self.value(a).raw_dim();
        let value = Tensor::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(
            value,
            Some(Box::new(move |_, _, g, sink| {
                let gv = g.first().copied().unwrap_or(0.0);
                sink.add(a, Tensor::from_elem(shape.clone(), gv));
            })),
            None,
        )
    }

    /// Multiply a (H, W, C) feature map by a (H, W) mask, broadcasting over
    /// channels.
    pub fn mul_mask(&mut self, feat: NodeId, mask: NodeId) -> NodeId {
        let fs = self.value(feat).shape().to_vec();
        let ms = self.value(mask).shape().to_vec();
        assert_eq!(fs.len(), 3, "mul_mask feature rank");
        assert_eq!(&fs[..2], &ms[..], "mul_mask resolution mismatch");
        let (h, w, c) = (fs[0], fs[1], fs[2]);
        let f = self.value(feat).as_slice().unwrap();
        let m = self.value(mask).as_slice().unwrap();
        let mut data = vec![0.0; h * w * c];
        for s in 0..h * w {
            let mv = m[s];
            for k in 0..c {
                data[s * c + k] = f[s * c + k] * mv;
            }
        }
        let value = Tensor::from_shape_vec(IxDyn(&[h, w, c]), data).unwrap();
        self.push(
            value,
            Some(Box::new(move |graph, _, g, sink| {
                let gs = g.as_slice().unwrap();
                let f = graph.value(feat).as_slice().unwrap();
                let m = graph.value(mask).as_slice().unwrap();
                let mut df = vec![0.0; h * w * c];
                let mut dm = vec![0.0; h * w];
                for s in 0..h * w {
                    let mv = m[s];
                    let mut acc = 0.0;
                    for k in 0..c {
                        df[s * c + k] = gs[s * c + k] * mv;
                        acc += gs[s * c + k] * f[s * c + k];
                    }
                    dm[s] = acc;
                }
                sink.add(feat, Tensor::from_shape_vec(IxDyn(&[h, w, c]), df).unwrap());
                sink.add(mask, Tensor::from_shape_vec(IxDyn(&[h, w]), dm).unwrap());
            })),
            None,
        )
    }
}

fn gelu_exact(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_small = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_big + x * phi_small
}

// ---- parameters and the optimizer ----

/// Named, ordered parameter storage. Registration order is the iteration
/// order everywhere, which keeps training bit-deterministic.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(self.id(name).is_none(), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Adam with the usual bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> =
            store.ids().map(|id| Tensor::zeros(store.value(id).raw_dim())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let value = store.value_mut(id);
            for ((p, m), v) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mh = m / bc1;
                let vh = v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
