use ndarray::{Array4, ArrayD};

use super::kernels::{conv_backward, conv_forward, maxpool2, upsample2, upsample2_backward, ConvShape};
use super::{ConvLayer, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Conv { x: NodeId, layer: ConvLayer, group: usize },
    Relu(NodeId),
    MaxPool { x: NodeId, argmax: Vec<u32> },
    Upsample(NodeId),
    Concat(Vec<NodeId>),
    Add(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded forward pass over one or more parameter groups.
///
/// Parameters of a group marked non-trainable receive no gradient, and
/// subgraphs that only depend on non-trainable groups are skipped entirely
/// during the backward pass.
pub struct Graph<'a> {
    stores: Vec<&'a ParamStore>,
    trainable: Vec<bool>,
    nodes: Vec<Node>,
    scratch: Vec<f32>,
}

fn dims(t: &Tensor) -> (usize, usize, usize, usize) {
    t.dim()
}

impl<'a> Graph<'a> {
    pub fn new(stores: Vec<&'a ParamStore>, trainable: Vec<bool>) -> Self {
        assert_eq!(stores.len(), trainable.len());
        Self {
            stores,
            trainable,
            nodes: Vec::new(),
            scratch: Vec::new(),
        }
    }

    /// Graph for inference only: nothing is trainable.
    pub fn inference(stores: Vec<&'a ParamStore>) -> Self {
        let n = stores.len();
        Self::new(stores, vec![false; n])
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value.as_standard_layout().into_owned(), Op::Input, false)
    }

    pub fn conv(&mut self, group: usize, layer: ConvLayer, x: NodeId) -> NodeId {
        let (n, c, h, w) = dims(self.value(x));
        assert_eq!(c, layer.in_channels, "conv input channels");
        let store = self.stores[group];
        let weight = store.get(layer.weight).as_slice().expect("contiguous weight");
        let bias = store.get(layer.bias).as_slice().expect("contiguous bias");
        let shape = ConvShape {
            cin: c,
            cout: layer.out_channels,
            kernel: layer.kernel,
            h,
            w,
        };
        let mut out = Array4::<f32>::zeros((n, layer.out_channels, h, w));
        {
            let xs = self.nodes[x.0].value.as_slice().expect("standard layout");
            let ys = out.as_slice_mut().expect("standard layout");
            let (in_sz, out_sz) = (c * h * w, layer.out_channels * h * w);
            for i in 0..n {
                conv_forward(
                    &shape,
                    &xs[i * in_sz..(i + 1) * in_sz],
                    weight,
                    bias,
                    &mut ys[i * out_sz..(i + 1) * out_sz],
                    &mut self.scratch,
                );
            }
        }
        let needs = self.trainable[group] || self.nodes[x.0].needs_grad;
        self.push(out, Op::Conv { x, layer, group }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        // NaN passes through so divergence stays visible in the loss
        let out = self.value(x).mapv(|v| if v < 0.0 { 0.0 } else { v });
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::Relu(x), needs)
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = dims(self.value(x));
        assert!(h % 2 == 0 && w % 2 == 0, "max pooling needs even spatial size, got {h}x{w}");
        let mut out = Array4::<f32>::zeros((n, c, h / 2, w / 2));
        let mut argmax = vec![0u32; out.len()];
        {
            let xs = self.nodes[x.0].value.as_slice().expect("standard layout");
            let ys = out.as_slice_mut().expect("standard layout");
            let (in_sz, out_sz) = (c * h * w, c * h * w / 4);
            for i in 0..n {
                maxpool2(
                    &xs[i * in_sz..(i + 1) * in_sz],
                    c,
                    h,
                    w,
                    &mut ys[i * out_sz..(i + 1) * out_sz],
                    &mut argmax[i * out_sz..(i + 1) * out_sz],
                    i * in_sz,
                );
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::MaxPool { x, argmax }, needs)
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = dims(self.value(x));
        let mut out = Array4::<f32>::zeros((n, c, 2 * h, 2 * w));
        {
            let xs = self.nodes[x.0].value.as_slice().expect("standard layout");
            let ys = out.as_slice_mut().expect("standard layout");
            let (in_sz, out_sz) = (c * h * w, 4 * c * h * w);
            for i in 0..n {
                upsample2(&xs[i * in_sz..(i + 1) * in_sz], c, h, w, &mut ys[i * out_sz..(i + 1) * out_sz]);
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::Upsample(x), needs)
    }

    /// Concatenate along channels.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let (n, _, h, w) = dims(self.value(parts[0]));
        let total: usize = parts.iter().map(|p| self.value(*p).dim().1).sum();
        let mut out = Array4::<f32>::zeros((n, total, h, w));
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!((v.dim().0, v.dim().2, v.dim().3), (n, h, w), "concat shape");
            let c = v.dim().1;
            out.slice_mut(ndarray::s![.., offset..offset + c, .., ..]).assign(v);
            offset += c;
        }
        let needs = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(out, Op::Concat(parts.to_vec()), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) + self.value(b);
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(out, Op::Add(a, b), needs)
    }

    /// Reverse pass from `output` seeded with `grad_output`. Returns one
    /// gradient list per parameter group (`None` for frozen groups).
    pub fn backward(mut self, output: NodeId, grad_output: Tensor) -> Vec<Option<Vec<ArrayD<f32>>>> {
        assert_eq!(grad_output.dim(), self.value(output).dim(), "seed gradient shape");
        let mut param_grads: Vec<Option<Vec<ArrayD<f32>>>> = self
            .stores
            .iter()
            .zip(&self.trainable)
            .map(|(s, &t)| t.then(|| s.zeros_like()))
            .collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(grad_output.as_standard_layout().into_owned());

        fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Conv { x, layer, group } => {
                    let (x, layer, group) = (*x, *layer, *group);
                    let xv = &self.nodes[x.0].value;
                    let (n, c, h, w) = xv.dim();
                    let shape = ConvShape {
                        cin: c,
                        cout: layer.out_channels,
                        kernel: layer.kernel,
                        h,
                        w,
                    };
                    let weight = self.stores[group].get(layer.weight).as_slice().expect("contiguous weight");
                    let xs = xv.as_slice().expect("standard layout");
                    let gs = g.as_slice().expect("standard layout");
                    let want_dx = self.nodes[x.0].needs_grad;
                    let mut dx = want_dx.then(|| Array4::<f32>::zeros((n, c, h, w)));
                    let (in_sz, out_sz) = (c * h * w, layer.out_channels * h * w);
                    let mut pg = param_grads[group].as_mut().map(|v| {
                        // split borrow of weight/bias gradients
                        let (lo, hi) = if layer.weight < layer.bias {
                            let (a, b) = v.split_at_mut(layer.bias);
                            (&mut a[layer.weight], &mut b[0])
                        } else {
                            let (a, b) = v.split_at_mut(layer.weight);
                            (&mut b[0], &mut a[layer.bias])
                        };
                        (lo, hi)
                    });
                    for i in 0..n {
                        let dw = pg.as_mut().map(|(dw, db)| {
                            (
                                dw.as_slice_mut().expect("contiguous grad"),
                                db.as_slice_mut().expect("contiguous grad"),
                            )
                        });
                        let dxs = dx
                            .as_mut()
                            .map(|d| &mut d.as_slice_mut().expect("standard layout")[i * in_sz..(i + 1) * in_sz]);
                        conv_backward(
                            &shape,
                            &xs[i * in_sz..(i + 1) * in_sz],
                            weight,
                            &gs[i * out_sz..(i + 1) * out_sz],
                            dw,
                            dxs,
                            &mut self.scratch,
                        );
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    let mut dx = g;
                    dx.zip_mut_with(&self.nodes[idx].value, |d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads[x.0], dx);
                }
                Op::MaxPool { x, argmax } => {
                    let x = *x;
                    let mut dx = Array4::<f32>::zeros(self.nodes[x.0].value.raw_dim());
                    let dxs = dx.as_slice_mut().expect("standard layout");
                    for (gv, &src) in g.iter().zip(argmax.iter()) {
                        dxs[src as usize] += gv;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Upsample(x) => {
                    let x = *x;
                    let (n, c, h, w) = self.nodes[x.0].value.dim();
                    let mut dx = Array4::<f32>::zeros((n, c, h, w));
                    {
                        let dxs = dx.as_slice_mut().expect("standard layout");
                        let gs = g.as_slice().expect("standard layout");
                        let (in_sz, out_sz) = (c * h * w, 4 * c * h * w);
                        for i in 0..n {
                            upsample2_backward(
                                &gs[i * out_sz..(i + 1) * out_sz],
                                c,
                                h,
                                w,
                                &mut dxs[i * in_sz..(i + 1) * in_sz],
                            );
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts.clone() {
                        let c = self.nodes[p.0].value.dim().1;
                        if self.nodes[p.0].needs_grad {
                            let part = g.slice(ndarray::s![.., offset..offset + c, .., ..]).to_owned();
                            accumulate(&mut grads[p.0], part);
                        }
                        offset += c;
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads[a.0], g);
                    }
                }
            }
        }
        param_grads
    }
}
