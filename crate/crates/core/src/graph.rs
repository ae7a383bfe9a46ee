//! Define-by-run reverse-mode autodiff over [`Tensor`].
//!
//! Each op computes its value eagerly on insertion; [`Graph::backward`]
//! replays the tape in reverse. Kernels are sequential and deterministic:
//! the same graph always produces bit-identical values and gradients.
//!
//! Layout conventions:
//! - feature volumes are channel-first `(C, X, Y, Z)` with Z contiguous,
//! - BEV maps are `(C, X, Y)`, image maps `(C, H, W)`,
//! - point rows are `(N, D)` with D contiguous,
//! - class fields are `(num_classes, V)` with voxels flattened row-major.

use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Precomputed projection taps for one pyramid level: which feature-map
/// texels each voxel reads, with bilinear weights already divided by the
/// number of valid cameras.
#[derive(Debug, Clone)]
pub struct SamplePlan<T> {
    pub dims: [usize; 3],
    pub map_h: usize,
    pub map_w: usize,
    /// Per-voxel ranges into `entries`; length `X*Y*Z + 1`.
    pub voxel_offsets: Vec<u32>,
    /// (camera index, flat y*W+x texel index, weight).
    pub entries: Vec<(u32, u32, T)>,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// (N, Din) x (Dout, Din) [+ (Dout)] -> (N, Dout)
    Linear {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
    },
    /// (Cin, H, W) * (Co, Cin, k, k) -> (Co, Ho, Wo)
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    /// (Cin, X, Y, Z) * (Co, Cin, k, k, k) -> (Co, X, Y, Z); stride 1
    Conv3d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        pad: usize,
    },
    /// x (C, spatial...) * gate (C) -> channel-wise product
    ChannelGate {
        x: NodeId,
        gate: NodeId,
    },
    /// vol (C, X, Y, Z) * gate (C, X, Y) broadcast along Z
    BevGate {
        vol: NodeId,
        gate: NodeId,
    },
    /// (C, spatial...) -> (C)
    GlobalAvgPool(NodeId),
    /// (C, X, Y, Z) -> (C, X, Y)
    MeanZ(NodeId),
    /// (C, X, Y, Z) -> (C, X/2, Y/2, Z/2), mean of 8 children
    AvgDown3d(NodeId),
    /// (C, X, Y, Z) -> (C, 2X, 2Y, 2Z), nearest
    Upsample3d(NodeId),
    /// channel-first concat
    ConcatC(Vec<NodeId>),
    /// (V, T, D) -> (V, D), max over rows t < counts[v]
    MaskedMaxRows {
        x: NodeId,
        counts: Arc<Vec<usize>>,
    },
    /// rows (V, T, D) ++ pooled (V, D) -> (V, T, 2D)
    AppendPooled {
        rows: NodeId,
        pooled: NodeId,
    },
    /// (V, C) -> (C, X, Y, Z) at the given flat cell offsets
    ScatterVoxels {
        feats: NodeId,
        cells: Arc<Vec<u32>>,
        dims: [usize; 3],
    },
    /// bilinear gather from per-camera maps -> (C, X, Y, Z)
    CameraSample {
        maps: Vec<NodeId>,
        plan: Arc<SamplePlan<T>>,
    },
    /// (Cls, V) -> (Cls, V), softmax over classes per voxel
    SoftmaxClasses(NodeId),
    /// focal loss on logits (Cls, V) -> scalar
    FocalLoss {
        logits: NodeId,
        labels: Arc<Vec<u16>>,
        gamma: T,
        alpha: Arc<Vec<T>>,
    },
    /// Lovasz-softmax on probs (Cls, V) -> scalar
    LovaszSoftmax {
        probs: NodeId,
        labels: Arc<Vec<u16>>,
    },
    /// scene-class affinity on probs (Cls, V) -> scalar
    ScalLoss {
        probs: NodeId,
        labels: Arc<Vec<u16>>,
        semantic: bool,
    },
    /// weighted sum of scalars -> scalar
    WeightedSum(Vec<(NodeId, T)>),
    SumAll(NodeId),
    /// sum(x * probe) -> scalar
    DotReadout {
        x: NodeId,
        probe: Arc<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

const LOG_CLAMP_EPS: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn any_needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.needs(i))
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf { param: None }, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) }, true)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.any_needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = T::one();
        let out = self.value(x).map(|v| one / (one + (-v).exp()));
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    // ---- dense / conv ----

    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> NodeId {
        let (n, din) = {
            let s = self.value(x).shape();
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        let (dout, din_w) = {
            let s = self.value(w).shape();
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        assert_eq!(din, din_w);
        let mut out = Tensor::zeros(&[n, dout]);
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let os = out.data_mut();
            for r in 0..n {
                let xrow = &xs[r * din..(r + 1) * din];
                let orow = &mut os[r * dout..(r + 1) * dout];
                for o in 0..dout {
                    let wrow = &ws[o * din..(o + 1) * din];
                    let mut acc = T::zero();
                    for i in 0..din {
                        acc += xrow[i] * wrow[i];
                    }
                    orow[o] = acc;
                }
            }
            if let Some(b) = bias {
                let bs = self.value(b).data();
                assert_eq!(bs.len(), dout);
                for r in 0..n {
                    let orow = &mut os[r * dout..(r + 1) * dout];
                    for o in 0..dout {
                        orow[o] += bs[o];
                    }
                }
            }
        }
        let mut ids = vec![x, w];
        if let Some(b) = bias {
            ids.push(b);
        }
        let ng = self.any_needs(&ids);
        self.push(out, Op::Linear { x, w, bias }, ng)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3]);
        let out = conv2d_forward(
            self.value(x).data(),
            &[xs[0], xs[1], xs[2]],
            self.value(w).data(),
            &[ws[0], ws[1], ws[2]],
            bias.map(|b| self.value(b).data().to_vec()),
            stride,
            pad,
        );
        let mut ids = vec![x, w];
        if let Some(b) = bias {
            ids.push(b);
        }
        let ng = self.any_needs(&ids);
        self.push(out, Op::Conv2d { x, w, bias, stride, pad }, ng)
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, pad: usize) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 5);
        assert_eq!(xs[0], ws[1], "conv3d channel mismatch");
        assert!(ws[2] == ws[3] && ws[3] == ws[4]);
        let out = conv3d_forward(
            self.value(x).data(),
            &[xs[0], xs[1], xs[2], xs[3]],
            self.value(w).data(),
            &[ws[0], ws[1], ws[2]],
            bias.map(|b| self.value(b).data().to_vec()),
            pad,
        );
        let mut ids = vec![x, w];
        if let Some(b) = bias {
            ids.push(b);
        }
        let ng = self.any_needs(&ids);
        self.push(out, Op::Conv3d { x, w, bias, pad }, ng)
    }

    // ---- gating / pooling / resampling ----

    pub fn channel_gate(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        let c = self.value(gate).shape()[0];
        assert_eq!(self.value(gate).shape().len(), 1);
        assert_eq!(self.value(x).shape()[0], c);
        let spatial: usize = self.value(x).shape()[1..].iter().product();
        let mut out = self.value(x).clone();
        {
            let g = self.value(gate).data();
            let os = out.data_mut();
            for ch in 0..c {
                let gv = g[ch];
                for v in &mut os[ch * spatial..(ch + 1) * spatial] {
                    *v *= gv;
                }
            }
        }
        let ng = self.any_needs(&[x, gate]);
        self.push(out, Op::ChannelGate { x, gate }, ng)
    }

    pub fn bev_gate(&mut self, vol: NodeId, gate: NodeId) -> NodeId {
        let vs = self.value(vol).shape().to_vec();
        let gs = self.value(gate).shape().to_vec();
        assert_eq!(vs.len(), 4);
        assert_eq!(gs, vs[..3].to_vec());
        let z = vs[3];
        let mut out = self.value(vol).clone();
        {
            let g = self.value(gate).data();
            let os = out.data_mut();
            for (i, &gv) in g.iter().enumerate() {
                for v in &mut os[i * z..(i + 1) * z] {
                    *v *= gv;
                }
            }
        }
        let ng = self.any_needs(&[vol, gate]);
        self.push(out, Op::BevGate { vol, gate }, ng)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).shape().to_vec();
        let c = s[0];
        let spatial: usize = s[1..].iter().product();
        let inv = T::one() / T::of_usize(spatial.max(1));
        let mut out = Tensor::zeros(&[c]);
        {
            let xs = self.value(x).data();
            let os = out.data_mut();
            for ch in 0..c {
                let mut acc = T::zero();
                for &v in &xs[ch * spatial..(ch + 1) * spatial] {
                    acc += v;
                }
                os[ch] = acc * inv;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::GlobalAvgPool(x), ng)
    }

    pub fn mean_z(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4);
        let (c, xx, yy, zz) = (s[0], s[1], s[2], s[3]);
        let inv = T::one() / T::of_usize(zz);
        let mut out = Tensor::zeros(&[c, xx, yy]);
        {
            let xs = self.value(x).data();
            let os = out.data_mut();
            for i in 0..c * xx * yy {
                let mut acc = T::zero();
                for &v in &xs[i * zz..(i + 1) * zz] {
                    acc += v;
                }
                os[i] = acc * inv;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::MeanZ(x), ng)
    }

    pub fn avg_down3d(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4);
        assert!(s[1] % 2 == 0 && s[2] % 2 == 0 && s[3] % 2 == 0);
        let (c, xx, yy, zz) = (s[0], s[1], s[2], s[3]);
        let (ox, oy, oz) = (xx / 2, yy / 2, zz / 2);
        let eighth = T::of_f64(0.125);
        let mut out = Tensor::zeros(&[c, ox, oy, oz]);
        {
            let xs = self.value(x).data();
            let os = out.data_mut();
            for ch in 0..c {
                for i in 0..ox {
                    for j in 0..oy {
                        for k in 0..oz {
                            let mut acc = T::zero();
                            for di in 0..2 {
                                for dj in 0..2 {
                                    for dk in 0..2 {
                                        acc += xs[((ch * xx + 2 * i + di) * yy + 2 * j + dj) * zz
                                            + 2 * k
                                            + dk];
                                    }
                                }
                            }
                            os[((ch * ox + i) * oy + j) * oz + k] = acc * eighth;
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::AvgDown3d(x), ng)
    }

    pub fn upsample3d(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4);
        let (c, xx, yy, zz) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[c, 2 * xx, 2 * yy, 2 * zz]);
        {
            let xs = self.value(x).data();
            let os = out.data_mut();
            for ch in 0..c {
                for i in 0..2 * xx {
                    for j in 0..2 * yy {
                        for k in 0..2 * zz {
                            os[((ch * 2 * xx + i) * 2 * yy + j) * 2 * zz + k] =
                                xs[((ch * xx + i / 2) * yy + j / 2) * zz + k / 2];
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::Upsample3d(x), ng)
    }

    pub fn concat_c(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rest = self.value(parts[0]).shape()[1..].to_vec();
        let spatial: usize = rest.iter().product();
        let mut c_total = 0;
        for &p in parts {
            assert_eq!(self.value(p).shape()[1..].to_vec(), rest);
            c_total += self.value(p).shape()[0];
        }
        let mut shape = vec![c_total];
        shape.extend_from_slice(&rest);
        let mut out = Tensor::zeros(&shape);
        {
            let os = out.data_mut();
            let mut off = 0;
            for &p in parts {
                let d = self.value(p).data();
                os[off..off + d.len()].copy_from_slice(d);
                off += d.len();
            }
            debug_assert_eq!(off, c_total * spatial);
        }
        let ng = self.any_needs(parts);
        self.push(out, Op::ConcatC(parts.to_vec()), ng)
    }

    pub fn masked_max_rows(&mut self, x: NodeId, counts: Arc<Vec<usize>>) -> NodeId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3);
        let (vn, tn, dn) = (s[0], s[1], s[2]);
        assert_eq!(counts.len(), vn);
        let mut out = Tensor::zeros(&[vn, dn]);
        {
            let xs = self.value(x).data();
            let os = out.data_mut();
            for v in 0..vn {
                let cnt = counts[v];
                debug_assert!(cnt >= 1 && cnt <= tn);
                let orow = &mut os[v * dn..(v + 1) * dn];
                orow.copy_from_slice(&xs[v * tn * dn..v * tn * dn + dn]);
                for t in 1..cnt {
                    let row = &xs[(v * tn + t) * dn..(v * tn + t + 1) * dn];
                    for d in 0..dn {
                        if row[d] > orow[d] {
                            orow[d] = row[d];
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::MaskedMaxRows { x, counts }, ng)
    }

    pub fn append_pooled(&mut self, rows: NodeId, pooled: NodeId) -> NodeId {
        let rs = self.value(rows).shape().to_vec();
        let ps = self.value(pooled).shape().to_vec();
        assert_eq!(rs.len(), 3);
        assert_eq!(ps, vec![rs[0], rs[2]]);
        let (vn, tn, dn) = (rs[0], rs[1], rs[2]);
        let mut out = Tensor::zeros(&[vn, tn, 2 * dn]);
        {
            let r = self.value(rows).data();
            let p = self.value(pooled).data();
            let os = out.data_mut();
            for v in 0..vn {
                let prow = &p[v * dn..(v + 1) * dn];
                for t in 0..tn {
                    let o = &mut os[(v * tn + t) * 2 * dn..(v * tn + t + 1) * 2 * dn];
                    o[..dn].copy_from_slice(&r[(v * tn + t) * dn..(v * tn + t + 1) * dn]);
                    o[dn..].copy_from_slice(prow);
                }
            }
        }
        let ng = self.any_needs(&[rows, pooled]);
        self.push(out, Op::AppendPooled { rows, pooled }, ng)
    }

    pub fn scatter_voxels(&mut self, feats: NodeId, cells: Arc<Vec<u32>>, dims: [usize; 3]) -> NodeId {
        let fs = self.value(feats).shape().to_vec();
        assert_eq!(fs.len(), 2);
        let (vn, c) = (fs[0], fs[1]);
        assert_eq!(cells.len(), vn);
        let spatial = dims[0] * dims[1] * dims[2];
        let mut out = Tensor::zeros(&[c, dims[0], dims[1], dims[2]]);
        {
            let f = self.value(feats).data();
            let os = out.data_mut();
            for v in 0..vn {
                let cell = cells[v] as usize;
                debug_assert!(cell < spatial);
                for ch in 0..c {
                    os[ch * spatial + cell] = f[v * c + ch];
                }
            }
        }
        let ng = self.needs(feats);
        self.push(out, Op::ScatterVoxels { feats, cells, dims }, ng)
    }

    pub fn camera_sample(&mut self, maps: &[NodeId], plan: Arc<SamplePlan<T>>) -> NodeId {
        assert!(!maps.is_empty());
        let c = self.value(maps[0]).shape()[0];
        let hw = plan.map_h * plan.map_w;
        for &m in maps {
            let s = self.value(m).shape();
            assert_eq!(s, &[c, plan.map_h, plan.map_w]);
        }
        let vtotal = plan.dims[0] * plan.dims[1] * plan.dims[2];
        assert_eq!(plan.voxel_offsets.len(), vtotal + 1);
        let mut out = Tensor::zeros(&[c, plan.dims[0], plan.dims[1], plan.dims[2]]);
        {
            let os = out.data_mut();
            for v in 0..vtotal {
                let lo = plan.voxel_offsets[v] as usize;
                let hi = plan.voxel_offsets[v + 1] as usize;
                for &(cam, idx, w) in &plan.entries[lo..hi] {
                    let md = self.value(maps[cam as usize]).data();
                    let idx = idx as usize;
                    for ch in 0..c {
                        os[ch * vtotal + v] += w * md[ch * hw + idx];
                    }
                }
            }
        }
        let ng = self.any_needs(maps);
        self.push(
            out,
            Op::CameraSample {
                maps: maps.to_vec(),
                plan,
            },
            ng,
        )
    }

    // ---- classification / losses ----

    pub fn softmax_classes(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 2);
        let (cls, v) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[cls, v]);
        {
            let xs = self.value(x).data();
            let os = out.data_mut();
            for j in 0..v {
                let mut m = xs[j];
                for c in 1..cls {
                    let val = xs[c * v + j];
                    if val > m {
                        m = val;
                    }
                }
                let mut sum = T::zero();
                for c in 0..cls {
                    let e = (xs[c * v + j] - m).exp();
                    os[c * v + j] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for c in 0..cls {
                    os[c * v + j] *= inv;
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::SoftmaxClasses(x), ng)
    }

    pub fn focal_loss(
        &mut self,
        logits: NodeId,
        labels: Arc<Vec<u16>>,
        gamma: T,
        alpha: Arc<Vec<T>>,
    ) -> NodeId {
        let s = self.value(logits).shape().to_vec();
        assert_eq!(s.len(), 2);
        let (cls, v) = (s[0], s[1]);
        assert_eq!(labels.len(), v);
        assert_eq!(alpha.len(), cls);
        let value = {
            let xs = self.value(logits).data();
            let mut total = T::zero();
            for j in 0..v {
                let y = labels[j] as usize;
                debug_assert!(y < cls);
                let (logp_y, _) = log_softmax_at(xs, cls, v, j, y);
                let p_y = logp_y.exp();
                let focus = (T::one() - p_y).powf(gamma);
                total += -alpha[y] * focus * logp_y;
            }
            total / T::of_usize(v.max(1))
        };
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(value),
            Op::FocalLoss {
                logits,
                labels,
                gamma,
                alpha,
            },
            ng,
        )
    }

    pub fn lovasz_softmax(&mut self, probs: NodeId, labels: Arc<Vec<u16>>) -> NodeId {
        let s = self.value(probs).shape().to_vec();
        assert_eq!(s.len(), 2);
        let (cls, v) = (s[0], s[1]);
        assert_eq!(labels.len(), v);
        let value = lovasz_forward(self.value(probs).data(), cls, v, &labels);
        let ng = self.needs(probs);
        self.push(
            Tensor::scalar(value),
            Op::LovaszSoftmax { probs, labels },
            ng,
        )
    }

    pub fn scal_loss(&mut self, probs: NodeId, labels: Arc<Vec<u16>>, semantic: bool) -> NodeId {
        let s = self.value(probs).shape().to_vec();
        assert_eq!(s.len(), 2);
        let (cls, v) = (s[0], s[1]);
        assert_eq!(labels.len(), v);
        let value = scal_forward(self.value(probs).data(), cls, v, &labels, semantic);
        let ng = self.needs(probs);
        self.push(
            Tensor::scalar(value),
            Op::ScalLoss {
                probs,
                labels,
                semantic,
            },
            ng,
        )
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> NodeId {
        let mut acc = T::zero();
        for &(id, w) in terms {
            debug_assert!(self.value(id).len() == 1);
            acc += self.value(id).item() * w;
        }
        let ng = self.any_needs(&terms.iter().map(|t| t.0).collect::<Vec<_>>());
        self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), ng)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let acc: T = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(acc), Op::SumAll(x), ng)
    }

    pub fn dot_readout(&mut self, x: NodeId, probe: Arc<Tensor<T>>) -> NodeId {
        assert_eq!(self.value(x).shape(), probe.shape());
        let acc: T = self
            .value(x)
            .data()
            .iter()
            .zip(probe.data().iter())
            .map(|(&a, &b)| a * b)
            .sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(acc), Op::DotReadout { x, probe }, ng)
    }

    // ---- backward ----

    /// Reverse pass from a scalar root. Parameter gradients accumulate into
    /// `params` when given; leaf-input gradients are readable from the
    /// returned [`Gradients`].
    pub fn backward(&self, root: NodeId, mut params: Option<&mut ParamStore<T>>) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let gout = grads[i].take().unwrap();
            self.backprop_node(i, &gout, &mut grads);
            if let Op::Leaf { param: Some(pid) } = self.nodes[i].op {
                if let Some(ps) = params.as_mut() {
                    ps.accumulate_grad(pid, &gout);
                }
            }
            grads[i] = Some(gout);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn grad_slot<'a>(
        &self,
        grads: &'a mut [Option<Tensor<T>>],
        id: NodeId,
    ) -> Option<&'a mut Tensor<T>> {
        if !self.needs(id) {
            return None;
        }
        if grads[id.0].is_none() {
            grads[id.0] = Some(Tensor::zeros(self.value(id).shape()));
        }
        grads[id.0].as_mut()
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, gout: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.clone());
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accum(grads, *x, gout.map(|v| v * s));
            }
            Op::Relu(x) => {
                let xin = self.value(*x).data();
                let mut d = gout.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(xin.iter()) {
                    if xv <= T::zero() {
                        *dv = T::zero();
                    }
                }
                self.accum(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                let mut d = gout.clone();
                for (dv, &yv) in d.data_mut().iter_mut().zip(y.iter()) {
                    *dv = *dv * yv * (T::one() - yv);
                }
                self.accum(grads, *x, d);
            }
            Op::Linear { x, w, bias } => {
                let (n, din) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1])
                };
                let dout_w = self.value(*w).shape()[0];
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let go = gout.data();
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(&[n, din]);
                    let d = dx.data_mut();
                    for r in 0..n {
                        let grow = &go[r * dout_w..(r + 1) * dout_w];
                        let drow = &mut d[r * din..(r + 1) * din];
                        for o in 0..dout_w {
                            let gv = grow[o];
                            let wrow = &ws[o * din..(o + 1) * din];
                            for k in 0..din {
                                drow[k] += gv * wrow[k];
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(&[dout_w, din]);
                    let d = dw.data_mut();
                    for r in 0..n {
                        let grow = &go[r * dout_w..(r + 1) * dout_w];
                        let xrow = &xs[r * din..(r + 1) * din];
                        for o in 0..dout_w {
                            let gv = grow[o];
                            let drow = &mut d[o * din..(o + 1) * din];
                            for k in 0..din {
                                drow[k] += gv * xrow[k];
                            }
                        }
                    }
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(&[dout_w]);
                        let d = db.data_mut();
                        for r in 0..n {
                            for o in 0..dout_w {
                                d[o] += go[r * dout_w + o];
                            }
                        }
                        self.accum(grads, *b, db);
                    }
                }
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x).data(),
                    &[xs[0], xs[1], xs[2]],
                    self.value(*w).data(),
                    &[ws[0], ws[1], ws[2]],
                    gout.data(),
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                    bias.map(|b| self.needs(b)).unwrap_or(false),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accum(grads, *b, db);
                }
            }
            Op::Conv3d { x, w, bias, pad } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let (dx, dw, db) = conv3d_backward(
                    self.value(*x).data(),
                    &[xs[0], xs[1], xs[2], xs[3]],
                    self.value(*w).data(),
                    &[ws[0], ws[1], ws[2]],
                    gout.data(),
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                    bias.map(|b| self.needs(b)).unwrap_or(false),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accum(grads, *b, db);
                }
            }
            Op::ChannelGate { x, gate } => {
                let c = self.value(*gate).shape()[0];
                let spatial: usize = self.value(*x).shape()[1..].iter().product();
                let go = gout.data();
                if self.needs(*x) {
                    let g = self.value(*gate).data();
                    let mut dx = gout.clone();
                    let d = dx.data_mut();
                    for ch in 0..c {
                        let gv = g[ch];
                        for v in &mut d[ch * spatial..(ch + 1) * spatial] {
                            *v *= gv;
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                if self.needs(*gate) {
                    let xv = self.value(*x).data();
                    let mut dg = Tensor::zeros(&[c]);
                    let d = dg.data_mut();
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for s in 0..spatial {
                            acc += go[ch * spatial + s] * xv[ch * spatial + s];
                        }
                        d[ch] = acc;
                    }
                    self.accum(grads, *gate, dg);
                }
            }
            Op::BevGate { vol, gate } => {
                let z = self.value(*vol).shape()[3];
                let cols = self.value(*gate).len();
                let go = gout.data();
                if self.needs(*vol) {
                    let g = self.value(*gate).data();
                    let mut dv = gout.clone();
                    let d = dv.data_mut();
                    for i2 in 0..cols {
                        let gv = g[i2];
                        for v in &mut d[i2 * z..(i2 + 1) * z] {
                            *v *= gv;
                        }
                    }
                    self.accum(grads, *vol, dv);
                }
                if self.needs(*gate) {
                    let vv = self.value(*vol).data();
                    let mut dg = Tensor::zeros(self.value(*gate).shape());
                    let d = dg.data_mut();
                    for (i2, dgi) in d.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for k in 0..z {
                            acc += go[i2 * z + k] * vv[i2 * z + k];
                        }
                        *dgi = acc;
                    }
                    self.accum(grads, *gate, dg);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape().to_vec();
                let c = s[0];
                let spatial: usize = s[1..].iter().product();
                let inv = T::one() / T::of_usize(spatial.max(1));
                let go = gout.data();
                let mut dx = Tensor::zeros(&s);
                let d = dx.data_mut();
                for ch in 0..c {
                    let gv = go[ch] * inv;
                    for v in &mut d[ch * spatial..(ch + 1) * spatial] {
                        *v = gv;
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::MeanZ(x) => {
                let s = self.value(*x).shape().to_vec();
                let zz = s[3];
                let inv = T::one() / T::of_usize(zz);
                let go = gout.data();
                let mut dx = Tensor::zeros(&s);
                let d = dx.data_mut();
                for (i2, &gv) in go.iter().enumerate() {
                    let gvz = gv * inv;
                    for v in &mut d[i2 * zz..(i2 + 1) * zz] {
                        *v = gvz;
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::AvgDown3d(x) => {
                let s = self.value(*x).shape().to_vec();
                let (c, xx, yy, zz) = (s[0], s[1], s[2], s[3]);
                let (ox, oy, oz) = (xx / 2, yy / 2, zz / 2);
                let eighth = T::of_f64(0.125);
                let go = gout.data();
                let mut dx = Tensor::zeros(&s);
                let d = dx.data_mut();
                for ch in 0..c {
                    for i2 in 0..ox {
                        for j in 0..oy {
                            for k in 0..oz {
                                let gv = go[((ch * ox + i2) * oy + j) * oz + k] * eighth;
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        for dk in 0..2 {
                                            d[((ch * xx + 2 * i2 + di) * yy + 2 * j + dj) * zz
                                                + 2 * k
                                                + dk] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Upsample3d(x) => {
                let s = self.value(*x).shape().to_vec();
                let (c, xx, yy, zz) = (s[0], s[1], s[2], s[3]);
                let go = gout.data();
                let mut dx = Tensor::zeros(&s);
                let d = dx.data_mut();
                for ch in 0..c {
                    for i2 in 0..2 * xx {
                        for j in 0..2 * yy {
                            for k in 0..2 * zz {
                                d[((ch * xx + i2 / 2) * yy + j / 2) * zz + k / 2] +=
                                    go[((ch * 2 * xx + i2) * 2 * yy + j) * 2 * zz + k];
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::ConcatC(parts) => {
                let go = gout.data();
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(self.value(p).shape());
                        dp.data_mut().copy_from_slice(&go[off..off + len]);
                        self.accum(grads, p, dp);
                    }
                    off += len;
                }
            }
            Op::MaskedMaxRows { x, counts } => {
                let s = self.value(*x).shape().to_vec();
                let (vn, tn, dn) = (s[0], s[1], s[2]);
                let xs = self.value(*x).data();
                let go = gout.data();
                let mut dx = Tensor::zeros(&s);
                let d = dx.data_mut();
                for v in 0..vn {
                    let cnt = counts[v];
                    for dd in 0..dn {
                        let mut best_t = 0;
                        let mut best = xs[v * tn * dn + dd];
                        for t in 1..cnt {
                            let val = xs[(v * tn + t) * dn + dd];
                            if val > best {
                                best = val;
                                best_t = t;
                            }
                        }
                        d[(v * tn + best_t) * dn + dd] += go[v * dn + dd];
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::AppendPooled { rows, pooled } => {
                let rs = self.value(*rows).shape().to_vec();
                let (vn, tn, dn) = (rs[0], rs[1], rs[2]);
                let go = gout.data();
                if self.needs(*rows) {
                    let mut dr = Tensor::zeros(&rs);
                    let d = dr.data_mut();
                    for v in 0..vn {
                        for t in 0..tn {
                            let src = &go[(v * tn + t) * 2 * dn..(v * tn + t) * 2 * dn + dn];
                            d[(v * tn + t) * dn..(v * tn + t + 1) * dn].copy_from_slice(src);
                        }
                    }
                    self.accum(grads, *rows, dr);
                }
                if self.needs(*pooled) {
                    let mut dp = Tensor::zeros(&[vn, dn]);
                    let d = dp.data_mut();
                    for v in 0..vn {
                        for t in 0..tn {
                            let src = &go[(v * tn + t) * 2 * dn + dn..(v * tn + t + 1) * 2 * dn];
                            for k in 0..dn {
                                d[v * dn + k] += src[k];
                            }
                        }
                    }
                    self.accum(grads, *pooled, dp);
                }
            }
            Op::ScatterVoxels { feats, cells, dims } => {
                let fs = self.value(*feats).shape().to_vec();
                let (vn, c) = (fs[0], fs[1]);
                let spatial = dims[0] * dims[1] * dims[2];
                let go = gout.data();
                let mut df = Tensor::zeros(&fs);
                let d = df.data_mut();
                for v in 0..vn {
                    let cell = cells[v] as usize;
                    for ch in 0..c {
                        d[v * c + ch] = go[ch * spatial + cell];
                    }
                }
                self.accum(grads, *feats, df);
            }
            Op::CameraSample { maps, plan } => {
                let c = self.value(maps[0]).shape()[0];
                let hw = plan.map_h * plan.map_w;
                let vtotal = plan.dims[0] * plan.dims[1] * plan.dims[2];
                let go = gout.data();
                for (ci, &m) in maps.iter().enumerate() {
                    if !self.needs(m) {
                        continue;
                    }
                    let dm = self.grad_slot(grads, m).unwrap();
                    let d = dm.data_mut();
                    for v in 0..vtotal {
                        let lo = plan.voxel_offsets[v] as usize;
                        let hi = plan.voxel_offsets[v + 1] as usize;
                        for &(cam, idx, w) in &plan.entries[lo..hi] {
                            if cam as usize != ci {
                                continue;
                            }
                            let idx = idx as usize;
                            for ch in 0..c {
                                d[ch * hw + idx] += w * go[ch * vtotal + v];
                            }
                        }
                    }
                }
            }
            Op::SoftmaxClasses(x) => {
                let s = self.value(*x).shape().to_vec();
                let (cls, v) = (s[0], s[1]);
                let p = self.nodes[i].value.data();
                let go = gout.data();
                let mut dx = Tensor::zeros(&s);
                let d = dx.data_mut();
                for j in 0..v {
                    let mut dot = T::zero();
                    for cidx in 0..cls {
                        dot += go[cidx * v + j] * p[cidx * v + j];
                    }
                    for cidx in 0..cls {
                        d[cidx * v + j] = p[cidx * v + j] * (go[cidx * v + j] - dot);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::FocalLoss {
                logits,
                labels,
                gamma,
                alpha,
            } => {
                let s = self.value(*logits).shape().to_vec();
                let (cls, v) = (s[0], s[1]);
                let xs = self.value(*logits).data();
                let gscale = gout.item() / T::of_usize(v.max(1));
                let mut dx = Tensor::zeros(&s);
                let d = dx.data_mut();
                let one = T::one();
                for j in 0..v {
                    let y = labels[j] as usize;
                    let (logp_y, lse) = log_softmax_at(xs, cls, v, j, y);
                    let p_y = logp_y.exp();
                    let omp = one - p_y;
                    // d/du of -alpha (1-u)^gamma ln u  at u = p_y
                    let dfdu = if *gamma == T::zero() {
                        -alpha[y] / p_y
                    } else {
                        -alpha[y] * (omp.powf(*gamma) / p_y
                            - *gamma * omp.powf(*gamma - one) * logp_y)
                    };
                    // du/dz_k = u (delta_ky - p_k)
                    for k in 0..cls {
                        let p_k = (xs[k * v + j] - lse).exp();
                        let delta = if k == y { one } else { T::zero() };
                        d[k * v + j] = gscale * dfdu * p_y * (delta - p_k);
                    }
                }
                self.accum(grads, *logits, dx);
            }
            Op::LovaszSoftmax { probs, labels } => {
                let s = self.value(*probs).shape().to_vec();
                let (cls, v) = (s[0], s[1]);
                let mut dx = Tensor::zeros(&s);
                lovasz_backward(
                    self.value(*probs).data(),
                    cls,
                    v,
                    labels,
                    gout.item(),
                    dx.data_mut(),
                );
                self.accum(grads, *probs, dx);
            }
            Op::ScalLoss {
                probs,
                labels,
                semantic,
            } => {
                let s = self.value(*probs).shape().to_vec();
                let (cls, v) = (s[0], s[1]);
                let mut dx = Tensor::zeros(&s);
                scal_backward(
                    self.value(*probs).data(),
                    cls,
                    v,
                    labels,
                    *semantic,
                    gout.item(),
                    dx.data_mut(),
                );
                self.accum(grads, *probs, dx);
            }
            Op::WeightedSum(terms) => {
                let gv = gout.item();
                for &(id, w) in terms {
                    self.accum(grads, id, Tensor::scalar(gv * w));
                }
            }
            Op::SumAll(x) => {
                let gv = gout.item();
                self.accum(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::DotReadout { x, probe } => {
                let gv = gout.item();
                let mut dx = probe.as_ref().clone();
                dx.scale_in_place(gv);
                self.accum(grads, *x, dx);
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Stable per-voxel log-softmax: returns (log p_y, logsumexp) for column j.
fn log_softmax_at<T: Scalar>(xs: &[T], cls: usize, v: usize, j: usize, y: usize) -> (T, T) {
    let mut m = xs[j];
    for c in 1..cls {
        let val = xs[c * v + j];
        if val > m {
            m = val;
        }
    }
    let mut sum = T::zero();
    for c in 0..cls {
        sum += (xs[c * v + j] - m).exp();
    }
    let lse = m + sum.ln();
    (xs[y * v + j] - lse, lse)
}

// ---- convolution kernels ----

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Output ranges with in-bounds input index: o in [lo, hi) such that
/// 0 <= o*stride + koff - pad < n.
fn valid_out_range(n: usize, nout: usize, koff: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if koff >= pad {
        0
    } else {
        (pad - koff).div_ceil(stride)
    };
    let max_i = n as isize - 1 - koff as isize + pad as isize;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = ((max_i as usize) / stride + 1).min(nout);
    (lo.min(hi), hi)
}

fn conv2d_forward<T: Scalar>(
    x: &[T],
    xdim: &[usize; 3],
    w: &[T],
    wdim: &[usize; 3],
    bias: Option<Vec<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (ci, h, wid) = (xdim[0], xdim[1], xdim[2]);
    let (co, _, k) = (wdim[0], wdim[1], wdim[2]);
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(wid, k, stride, pad);
    let mut out = Tensor::zeros(&[co, ho, wo]);
    let os = out.data_mut();
    for c_out in 0..co {
        if let Some(b) = &bias {
            let bv = b[c_out];
            for v in &mut os[c_out * ho * wo..(c_out + 1) * ho * wo] {
                *v = bv;
            }
        }
        for c_in in 0..ci {
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_out_range(h, ho, ky, stride, pad);
                for kx in 0..k {
                    let wv = w[((c_out * ci + c_in) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = valid_out_range(wid, wo, kx, stride, pad);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let in_base = (c_in * h + iy) * wid;
                        let out_base = (c_out * ho + oy) * wo;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - pad;
                            os[out_base + ox] += wv * x[in_base + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    x: &[T],
    xdim: &[usize; 3],
    w: &[T],
    wdim: &[usize; 3],
    gout: &[T],
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (ci, h, wid) = (xdim[0], xdim[1], xdim[2]);
    let (co, _, k) = (wdim[0], wdim[1], wdim[2]);
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(wid, k, stride, pad);

    let mut dx = if need_dx {
        Some(Tensor::zeros(&[ci, h, wid]))
    } else {
        None
    };
    let mut dw = if need_dw {
        Some(Tensor::zeros(&[co, ci, k, k]))
    } else {
        None
    };
    let mut db = if need_db {
        Some(Tensor::zeros(&[co]))
    } else {
        None
    };

    if let Some(db) = &mut db {
        let d = db.data_mut();
        for c_out in 0..co {
            let mut acc = T::zero();
            for &g in &gout[c_out * ho * wo..(c_out + 1) * ho * wo] {
                acc += g;
            }
            d[c_out] = acc;
        }
    }

    for c_out in 0..co {
        for c_in in 0..ci {
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_out_range(h, ho, ky, stride, pad);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = valid_out_range(wid, wo, kx, stride, pad);
                    let widx = ((c_out * ci + c_in) * k + ky) * k + kx;
                    let wv = w[widx];
                    let mut wacc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let in_base = (c_in * h + iy) * wid;
                        let out_base = (c_out * ho + oy) * wo;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - pad;
                            let g = gout[out_base + ox];
                            wacc += g * x[in_base + ix];
                            if let Some(dx) = &mut dx {
                                dx.data_mut()[in_base + ix] += g * wv;
                            }
                        }
                    }
                    if let Some(dw) = &mut dw {
                        dw.data_mut()[widx] += wacc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn conv3d_forward<T: Scalar>(
    x: &[T],
    xdim: &[usize; 4],
    w: &[T],
    wdim: &[usize; 3],
    bias: Option<Vec<T>>,
    pad: usize,
) -> Tensor<T> {
    let (ci, nx, ny, nz) = (xdim[0], xdim[1], xdim[2], xdim[3]);
    let (co, _, k) = (wdim[0], wdim[1], wdim[2]);
    let ox_n = conv_out_len(nx, k, 1, pad);
    let oy_n = conv_out_len(ny, k, 1, pad);
    let oz_n = conv_out_len(nz, k, 1, pad);
    let mut out = Tensor::zeros(&[co, ox_n, oy_n, oz_n]);
    let os = out.data_mut();
    for c_out in 0..co {
        if let Some(b) = &bias {
            let bv = b[c_out];
            for v in &mut os[c_out * ox_n * oy_n * oz_n..(c_out + 1) * ox_n * oy_n * oz_n] {
                *v = bv;
            }
        }
        for c_in in 0..ci {
            for kx in 0..k {
                let (x_lo, x_hi) = valid_out_range(nx, ox_n, kx, 1, pad);
                for ky in 0..k {
                    let (y_lo, y_hi) = valid_out_range(ny, oy_n, ky, 1, pad);
                    for kz in 0..k {
                        let wv = w[(((c_out * ci + c_in) * k + kx) * k + ky) * k + kz];
                        let (z_lo, z_hi) = valid_out_range(nz, oz_n, kz, 1, pad);
                        if z_lo >= z_hi {
                            continue;
                        }
                        for oxv in x_lo..x_hi {
                            let ix = oxv + kx - pad;
                            for oyv in y_lo..y_hi {
                                let iy = oyv + ky - pad;
                                let in_base = ((c_in * nx + ix) * ny + iy) * nz + z_lo + kz - pad;
                                let out_base = ((c_out * ox_n + oxv) * oy_n + oyv) * oz_n + z_lo;
                                let len = z_hi - z_lo;
                                let (src, dst) = (&x[in_base..in_base + len], &mut os[out_base..out_base + len]);
                                for (d, s) in dst.iter_mut().zip(src.iter()) {
                                    *d += wv * *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward<T: Scalar>(
    x: &[T],
    xdim: &[usize; 4],
    w: &[T],
    wdim: &[usize; 3],
    gout: &[T],
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (ci, nx, ny, nz) = (xdim[0], xdim[1], xdim[2], xdim[3]);
    let (co, _, k) = (wdim[0], wdim[1], wdim[2]);
    let ox_n = conv_out_len(nx, k, 1, pad);
    let oy_n = conv_out_len(ny, k, 1, pad);
    let oz_n = conv_out_len(nz, k, 1, pad);

    let mut dx = if need_dx {
        Some(Tensor::zeros(&[ci, nx, ny, nz]))
    } else {
        None
    };
    let mut dw = if need_dw {
        Some(Tensor::zeros(&[co, ci, k, k, k]))
    } else {
        None
    };
    let mut db = if need_db {
        Some(Tensor::zeros(&[co]))
    } else {
        None
    };

    if let Some(db) = &mut db {
        let d = db.data_mut();
        let plane = ox_n * oy_n * oz_n;
        for c_out in 0..co {
            let mut acc = T::zero();
            for &g in &gout[c_out * plane..(c_out + 1) * plane] {
                acc += g;
            }
            d[c_out] = acc;
        }
    }

    for c_out in 0..co {
        for c_in in 0..ci {
            for kx in 0..k {
                let (x_lo, x_hi) = valid_out_range(nx, ox_n, kx, 1, pad);
                for ky in 0..k {
                    let (y_lo, y_hi) = valid_out_range(ny, oy_n, ky, 1, pad);
                    for kz in 0..k {
                        let widx = (((c_out * ci + c_in) * k + kx) * k + ky) * k + kz;
                        let wv = w[widx];
                        let (z_lo, z_hi) = valid_out_range(nz, oz_n, kz, 1, pad);
                        if z_lo >= z_hi {
                            continue;
                        }
                        let len = z_hi - z_lo;
                        let mut wacc = T::zero();
                        for oxv in x_lo..x_hi {
                            let ix = oxv + kx - pad;
                            for oyv in y_lo..y_hi {
                                let iy = oyv + ky - pad;
                                let in_base = ((c_in * nx + ix) * ny + iy) * nz + z_lo + kz - pad;
                                let out_base = ((c_out * ox_n + oxv) * oy_n + oyv) * oz_n + z_lo;
                                let gs = &gout[out_base..out_base + len];
                                let xsrc = &x[in_base..in_base + len];
                                for (gq, xq) in gs.iter().zip(xsrc.iter()) {
                                    wacc += *gq * *xq;
                                }
                                if let Some(dx) = &mut dx {
                                    let dd = &mut dx.data_mut()[in_base..in_base + len];
                                    for (dq, gq) in dd.iter_mut().zip(gs.iter()) {
                                        *dq += wv * *gq;
                                    }
                                }
                            }
                        }
                        if let Some(dw) = &mut dw {
                            dw.data_mut()[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ---- Lovasz-softmax ----

fn present_classes(labels: &[u16], cls: usize) -> Vec<usize> {
    let mut seen = vec![false; cls];
    for &l in labels {
        seen[l as usize] = true;
    }
    (0..cls).filter(|&c| seen[c]).collect()
}

/// Gradient of the Jaccard-loss Lovasz extension for a descending-sorted
/// binary ground-truth vector.
fn lovasz_grad_sorted<T: Scalar>(fg_sorted: &[bool]) -> Vec<T> {
    let n = fg_sorted.len();
    let gts: usize = fg_sorted.iter().filter(|&&b| b).count();
    let mut out = Vec::with_capacity(n);
    let mut cum_fg = 0usize;
    let mut cum_bg = 0usize;
    let mut prev = T::zero();
    for (i, &fg) in fg_sorted.iter().enumerate() {
        if fg {
            cum_fg += 1;
        } else {
            cum_bg += 1;
        }
        let intersection = (gts - cum_fg) as f64;
        let union = (gts + cum_bg) as f64;
        let jac = T::of_f64(1.0 - intersection / union);
        out.push(if i == 0 { jac } else { jac - prev });
        prev = jac;
    }
    out
}

fn lovasz_forward<T: Scalar>(probs: &[T], cls: usize, v: usize, labels: &[u16]) -> T {
    let present = present_classes(labels, cls);
    if present.is_empty() {
        return T::zero();
    }
    let mut total = T::zero();
    for &c in &present {
        let mut idx: Vec<usize> = (0..v).collect();
        let errors: Vec<T> = (0..v)
            .map(|j| {
                let fg = labels[j] as usize == c;
                let p = probs[c * v + j];
                if fg {
                    T::one() - p
                } else {
                    p
                }
            })
            .collect();
        idx.sort_by(|&a, &b| {
            errors[b]
                .partial_cmp(&errors[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let fg_sorted: Vec<bool> = idx.iter().map(|&j| labels[j] as usize == c).collect();
        let g = lovasz_grad_sorted::<T>(&fg_sorted);
        let mut acc = T::zero();
        for (r, &j) in idx.iter().enumerate() {
            acc += errors[j] * g[r];
        }
        total += acc;
    }
    total / T::of_usize(present.len())
}

fn lovasz_backward<T: Scalar>(
    probs: &[T],
    cls: usize,
    v: usize,
    labels: &[u16],
    gout: T,
    dx: &mut [T],
) {
    let present = present_classes(labels, cls);
    if present.is_empty() {
        return;
    }
    let scale = gout / T::of_usize(present.len());
    for &c in &present {
        let mut idx: Vec<usize> = (0..v).collect();
        let errors: Vec<T> = (0..v)
            .map(|j| {
                let fg = labels[j] as usize == c;
                let p = probs[c * v + j];
                if fg {
                    T::one() - p
                } else {
                    p
                }
            })
            .collect();
        idx.sort_by(|&a, &b| {
            errors[b]
                .partial_cmp(&errors[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let fg_sorted: Vec<bool> = idx.iter().map(|&j| labels[j] as usize == c).collect();
        let g = lovasz_grad_sorted::<T>(&fg_sorted);
        for (r, &j) in idx.iter().enumerate() {
            let sign = if labels[j] as usize == c {
                -T::one()
            } else {
                T::one()
            };
            dx[c * v + j] += scale * sign * g[r];
        }
    }
}

// ---- scene-class affinity ----

fn clamped_neg_ln<T: Scalar>(x: T) -> T {
    let eps = T::of_f64(LOG_CLAMP_EPS);
    -(x.max(eps)).ln()
}

struct ScalTerms<T> {
    value: T,
    // d value / d p_v for the class channel this was computed on
    dl_dnom: T,
    dl_dsum: T,
    dl_dspec: T,
}

/// Affinity terms for one binary problem given soft scores p and hard
/// targets t: -ln(precision) - ln(recall) - ln(specificity), each included
/// only when its denominator is nonzero.
fn scal_terms<T: Scalar>(nominator: T, p_sum: T, spec_num: T, n_pos: usize, n_neg: usize) -> ScalTerms<T> {
    let eps = T::of_f64(LOG_CLAMP_EPS);
    let mut value = T::zero();
    let mut dl_dnom = T::zero();
    let mut dl_dsum = T::zero();
    let mut dl_dspec = T::zero();
    if p_sum > T::zero() {
        let precision = nominator / p_sum;
        value += clamped_neg_ln(precision);
        if precision > eps {
            dl_dnom += -T::one() / nominator;
            dl_dsum += T::one() / p_sum;
        }
    }
    if n_pos > 0 {
        let recall = nominator / T::of_usize(n_pos);
        value += clamped_neg_ln(recall);
        if recall > eps {
            dl_dnom += -T::one() / nominator;
        }
    }
    if n_neg > 0 {
        let specificity = spec_num / T::of_usize(n_neg);
        value += clamped_neg_ln(specificity);
        if specificity > eps {
            dl_dspec += -T::one() / spec_num;
        }
    }
    ScalTerms {
        value,
        dl_dnom,
        dl_dsum,
        dl_dspec,
    }
}

fn scal_class_stats<T: Scalar>(
    probs: &[T],
    v: usize,
    chan_base: usize,
    is_pos: impl Fn(usize) -> bool,
) -> (T, T, T, usize, usize) {
    let mut nominator = T::zero();
    let mut p_sum = T::zero();
    let mut spec_num = T::zero();
    let mut n_pos = 0;
    let mut n_neg = 0;
    for j in 0..v {
        let p = probs[chan_base + j];
        p_sum += p;
        if is_pos(j) {
            nominator += p;
            n_pos += 1;
        } else {
            spec_num += T::one() - p;
            n_neg += 1;
        }
    }
    (nominator, p_sum, spec_num, n_pos, n_neg)
}

fn scal_forward<T: Scalar>(probs: &[T], cls: usize, v: usize, labels: &[u16], semantic: bool) -> T {
    if !semantic {
        // Geometric: occupied probability is 1 - p_empty; targets binarize
        // to label != 0.
        let occ: Vec<T> = (0..v).map(|j| T::one() - probs[j]).collect();
        let (nom, p_sum, spec, n_pos, n_neg) =
            scal_class_stats(&occ, v, 0, |j| labels[j] != 0);
        return scal_terms(nom, p_sum, spec, n_pos, n_neg).value;
    }
    let mut total = T::zero();
    let mut counted = 0usize;
    for c in 0..cls {
        let (nom, p_sum, spec, n_pos, n_neg) =
            scal_class_stats(probs, v, c * v, |j| labels[j] as usize == c);
        // A class enters the average when present in the ground truth or
        // carrying any predicted mass.
        if n_pos == 0 && p_sum <= T::zero() {
            continue;
        }
        total += scal_terms(nom, p_sum, spec, n_pos, n_neg).value;
        counted += 1;
    }
    if counted == 0 {
        T::zero()
    } else {
        total / T::of_usize(counted)
    }
}

fn scal_backward<T: Scalar>(
    probs: &[T],
    cls: usize,
    v: usize,
    labels: &[u16],
    semantic: bool,
    gout: T,
    dx: &mut [T],
) {
    if !semantic {
        let occ: Vec<T> = (0..v).map(|j| T::one() - probs[j]).collect();
        let (nom, p_sum, spec, n_pos, n_neg) =
            scal_class_stats(&occ, v, 0, |j| labels[j] != 0);
        let t = scal_terms(nom, p_sum, spec, n_pos, n_neg);
        for j in 0..v {
            let pos = labels[j] != 0;
            // d/d p_occ
            let mut d = t.dl_dsum;
            if pos {
                d += t.dl_dnom;
            } else {
                d += -t.dl_dspec;
            }
            // p_occ = 1 - p_empty, so d/d p_empty flips sign.
            dx[j] += gout * -d;
        }
        return;
    }
    let mut selected: Vec<(usize, ScalTerms<T>)> = Vec::new();
    for c in 0..cls {
        let (nom, p_sum, spec, n_pos, n_neg) =
            scal_class_stats(probs, v, c * v, |j| labels[j] as usize == c);
        if n_pos == 0 && p_sum <= T::zero() {
            continue;
        }
        selected.push((c, scal_terms(nom, p_sum, spec, n_pos, n_neg)));
    }
    if selected.is_empty() {
        return;
    }
    let scale = gout / T::of_usize(selected.len());
    for (c, t) in selected {
        for j in 0..v {
            let pos = labels[j] as usize == c;
            let mut d = t.dl_dsum;
            if pos {
                d += t.dl_dnom;
            } else {
                d += -t.dl_dspec;
            }
            dx[c * v + j] += scale * d;
        }
    }
}
