//! Sequence encoders over the computation graph.
//!
//! Four families share one interface: a bidirectional LSTM, a Transformer
//! with sinusoidal position embeddings, a Transformer with clipped relative
//! positions in attention, and an order-reduced Transformer that drops
//! position embeddings entirely and pushes local order into a convolutional
//! feed-forward. All take an n x d_embed node and produce an n x d_model
//! node.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Bilstm,
    Trs,
    Rpt,
    Ort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    None,
    #[serde(alias = "sinusoid")]
    Sinusoidal,
    Learned,
    FrozenExternal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfMode {
    Linear,
    #[serde(rename = "conv1d", alias = "conv")]
    Conv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub family: Family,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub pe_mode: PeMode,
    pub ff_mode: FfMode,
    pub kernel_size: usize,
    pub conv_channels: usize,
    pub rpt_clip_distance: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl EncoderConfig {
    /// Family defaults: BiLSTM and RPT carry no absolute positions, TRS
    /// uses the sinusoid table, ORT additionally swaps the feed-forward
    /// for a width-3 convolution.
    pub fn for_family(family: Family) -> Self {
        let (pe_mode, ff_mode) = match family {
            Family::Bilstm => (PeMode::None, FfMode::Linear),
            Family::Trs => (PeMode::Sinusoidal, FfMode::Linear),
            Family::Rpt => (PeMode::None, FfMode::Linear),
            Family::Ort => (PeMode::None, FfMode::Conv),
        };
        EncoderConfig {
            family,
            d_model: 64,
            num_heads: 4,
            num_layers: 2,
            pe_mode,
            ff_mode,
            kernel_size: 3,
            conv_channels: 64,
            rpt_clip_distance: 8,
            dropout: 0.1,
            max_positions: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.num_layers == 0 {
            return fail("d_model and num_layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        match self.family {
            Family::Bilstm => {
                if self.pe_mode != PeMode::None {
                    return fail("bilstm does not take position embeddings".into());
                }
                if self.d_model % 2 != 0 {
                    return fail(format!(
                        "bilstm needs an even d_model to split directions, got {}",
                        self.d_model
                    ));
                }
            }
            Family::Trs | Family::Rpt | Family::Ort => {
                if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
                    return fail(format!(
                        "d_model {} must divide into num_heads {}",
                        self.d_model, self.num_heads
                    ));
                }
                if self.family == Family::Ort && self.pe_mode != PeMode::None {
                    return fail(
                        "the order-reduced encoder is defined without position embeddings".into(),
                    );
                }
                if self.family == Family::Rpt && self.pe_mode != PeMode::None {
                    return fail(
                        "relative-position attention replaces absolute embeddings; set pe_mode = \"none\"".into(),
                    );
                }
                if self.ff_mode == FfMode::Conv {
                    if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
                        return fail(format!(
                            "conv kernel size must be odd, got {}",
                            self.kernel_size
                        ));
                    }
                    if self.conv_channels == 0 {
                        return fail("conv_channels must be positive".into());
                    }
                }
                if self.family == Family::Rpt && self.rpt_clip_distance == 0 {
                    return fail("rpt_clip_distance must be positive".into());
                }
            }
        }
        if self.pe_mode != PeMode::None && self.max_positions == 0 {
            return fail("max_positions must be positive when position embeddings are used".into());
        }
        Ok(())
    }
}

/// Interleaved sin/cos table: row p, column 2i holds sin(p / 10000^(2i/d)),
/// column 2i+1 the matching cos.
pub fn sinusoidal_table(max_positions: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; max_positions * d_model];
    for pos in 0..max_positions {
        for j in 0..d_model {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
            data[pos * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_positions, d_model], data)
}

struct LayerParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    rel_k: Option<ParamId>,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
}

struct LstmDir {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

struct LstmLayer {
    fwd: LstmDir,
    bwd: LstmDir,
}

pub struct Encoder {
    pub config: EncoderConfig,
    pub d_embed: usize,
    proj_w: ParamId,
    proj_b: ParamId,
    pe: Option<ParamId>,
    layers: Vec<LayerParams>,
    lstm_layers: Vec<LstmLayer>,
    final_ln_g: Option<ParamId>,
    final_ln_b: Option<ParamId>,
}

impl Encoder {
    /// Wire the parameters for this configuration, registering fresh
    /// tensors for names the store does not yet hold; a store deserialized
    /// from disk therefore reconnects to the same wiring. `external_pe`
    /// supplies the frozen table when pe_mode is frozen_external; its width
    /// must equal d_model and its row count becomes the position budget.
    pub fn new(
        mut config: EncoderConfig,
        d_embed: usize,
        external_pe: Option<Tensor>,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Encoder> {
        config.validate()?;
        let d = config.d_model;
        let proj_w = store.obtain("enc.proj.w", &[d_embed, d], false, || {
            Tensor::glorot(d_embed, d, rng)
        })?;
        let proj_b = store.obtain("enc.proj.b", &[d], false, || Tensor::zeros(&[d]))?;
        let pe = match config.pe_mode {
            PeMode::None => None,
            PeMode::Sinusoidal => {
                let p = config.max_positions;
                Some(store.obtain("enc.pe", &[p, d], true, || sinusoidal_table(p, d))?)
            }
            PeMode::Learned => {
                let p = config.max_positions;
                Some(store.obtain("enc.pe", &[p, d], false, || {
                    Tensor::uniform(&[p, d], 0.1, rng)
                })?)
            }
            PeMode::FrozenExternal => {
                let table = match store.lookup("enc.pe") {
                    Some(pid) => store.get(pid).tensor.clone(),
                    None => external_pe.ok_or_else(|| {
                        Error::Config("pe_mode frozen_external requires a position table".into())
                    })?,
                };
                if table.cols() != d || table.shape().len() != 2 {
                    return Err(Error::Config(format!(
                        "external position table is {:?}, expected [*, {d}]",
                        table.shape()
                    )));
                }
                config.max_positions = table.rows();
                let rows = table.rows();
                Some(store.obtain("enc.pe", &[rows, d], true, || table)?)
            }
        };

        let mut enc = Encoder {
            config,
            d_embed,
            proj_w,
            proj_b,
            pe,
            layers: Vec::new(),
            lstm_layers: Vec::new(),
            final_ln_g: None,
            final_ln_b: None,
        };
        match enc.config.family {
            Family::Bilstm => {
                let h = d / 2;
                for l in 0..enc.config.num_layers {
                    let mut dir = |tag: &str| -> Result<LstmDir> {
                        Ok(LstmDir {
                            w: store.obtain(&format!("enc.l{l}.{tag}.w"), &[d, 4 * h], false, || {
                                Tensor::glorot(d, 4 * h, rng)
                            })?,
                            u: store.obtain(&format!("enc.l{l}.{tag}.u"), &[h, 4 * h], false, || {
                                Tensor::glorot(h, 4 * h, rng)
                            })?,
                            b: store.obtain(&format!("enc.l{l}.{tag}.b"), &[4 * h], false, || {
                                Tensor::zeros(&[4 * h])
                            })?,
                        })
                    };
                    let fwd = dir("fwd")?;
                    let bwd = dir("bwd")?;
                    enc.lstm_layers.push(LstmLayer { fwd, bwd });
                }
            }
            Family::Trs | Family::Rpt | Family::Ort => {
                let dh = d / enc.config.num_heads;
                let (ff_in, ff_hidden) = match enc.config.ff_mode {
                    FfMode::Linear => (d, enc.config.conv_channels),
                    FfMode::Conv => (enc.config.kernel_size * d, enc.config.conv_channels),
                };
                for l in 0..enc.config.num_layers {
                    let mut weight = |nm: &str, r: usize, c: usize| {
                        store.obtain(&format!("enc.l{l}.{nm}"), &[r, c], false, || {
                            Tensor::glorot(r, c, rng)
                        })
                    };
                    let wq = weight("wq", d, d)?;
                    let wk = weight("wk", d, d)?;
                    let wv = weight("wv", d, d)?;
                    let wo = weight("wo", d, d)?;
                    let rel_k = if enc.config.family == Family::Rpt {
                        let span = 2 * enc.config.rpt_clip_distance + 1;
                        Some(weight("rel_k", span, dh)?)
                    } else {
                        None
                    };
                    let ff_w1 = weight("ff.w1", ff_in, ff_hidden)?;
                    let ff_w2 = weight("ff.w2", ff_hidden, d)?;
                    let mut vector = |nm: &str, len: usize, fill: f64| {
                        store.obtain(&format!("enc.l{l}.{nm}"), &[len], false, || {
                            Tensor::filled(&[len], fill)
                        })
                    };
                    let ln1_g = vector("ln1.g", d, 1.0)?;
                    let ln1_b = vector("ln1.b", d, 0.0)?;
                    let ln2_g = vector("ln2.g", d, 1.0)?;
                    let ln2_b = vector("ln2.b", d, 0.0)?;
                    let ff_b1 = vector("ff.b1", ff_hidden, 0.0)?;
                    let ff_b2 = vector("ff.b2", d, 0.0)?;
                    enc.layers.push(LayerParams {
                        wq,
                        wk,
                        wv,
                        wo,
                        rel_k,
                        ln1_g,
                        ln1_b,
                        ln2_g,
                        ln2_b,
                        ff_w1,
                        ff_b1,
                        ff_w2,
                        ff_b2,
                    });
                }
                enc.final_ln_g = Some(store.obtain("enc.final_ln.g", &[d], false, || {
                    Tensor::filled(&[d], 1.0)
                })?);
                enc.final_ln_b =
                    Some(store.obtain("enc.final_ln.b", &[d], false, || Tensor::zeros(&[d]))?);
            }
        }
        Ok(enc)
    }

    /// Encode one sequence of already-embedded tokens (n x d_embed) into
    /// contextual states (n x d_model). `rng` only draws when `train_mode`
    /// enables dropout.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embedded: NodeId,
        train_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let n = g.value(embedded).rows();
        if n == 0 {
            return Err(Error::Data("cannot encode an empty sequence".into()));
        }
        if self.pe.is_some() && n > self.config.max_positions {
            return Err(Error::Data(format!(
                "sequence length {n} exceeds the position budget {}",
                self.config.max_positions
            )));
        }
        let proj_w = g.param(store, self.proj_w);
        let proj_b = g.param(store, self.proj_b);
        let projected = g.matmul(embedded, proj_w);
        let mut x = g.add_bias(projected, proj_b);
        if let Some(pe) = self.pe {
            let table = g.param(store, pe);
            let rows = g.slice_rows(table, 0, n);
            x = g.add(x, rows);
        }
        match self.config.family {
            Family::Bilstm => self.encode_bilstm(g, store, x, n, train_mode, rng),
            Family::Trs | Family::Rpt | Family::Ort => {
                self.encode_transformer(g, store, x, n, train_mode, rng)
            }
        }
    }

    fn dropout(
        &self,
        g: &mut Graph,
        x: NodeId,
        train_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> NodeId {
        let p = self.config.dropout;
        if !train_mode || p == 0.0 {
            return x;
        }
        let shape = g.value(x).shape().to_vec();
        let keep = 1.0 / (1.0 - p);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = g.input(Tensor::new(shape, data));
        g.mul(x, mask)
    }

    fn encode_transformer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: NodeId,
        n: usize,
        train_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        // relative offsets are shared by every layer; build them once
        let rel_idx: Option<Vec<Vec<usize>>> = if self.config.family == Family::Rpt {
            let c = self.config.rpt_clip_distance as isize;
            Some(
                (0..n as isize)
                    .map(|i| {
                        (0..n as isize)
                            .map(|j| ((j - i).clamp(-c, c) + c) as usize)
                            .collect()
                    })
                    .collect(),
            )
        } else {
            None
        };
        for layer in &self.layers {
            let ln1_g = g.param(store, layer.ln1_g);
            let ln1_b = g.param(store, layer.ln1_b);
            let normed = g.row_layer_norm(x, ln1_g, ln1_b, 1e-5);
            let attended = self.attention(g, store, layer, normed, rel_idx.as_deref());
            let attended = self.dropout(g, attended, train_mode, rng);
            x = g.add(x, attended);

            let ln2_g = g.param(store, layer.ln2_g);
            let ln2_b = g.param(store, layer.ln2_b);
            let normed = g.row_layer_norm(x, ln2_g, ln2_b, 1e-5);
            let ff = self.feed_forward(g, store, layer, normed);
            let ff = self.dropout(g, ff, train_mode, rng);
            x = g.add(x, ff);
        }
        let fg = g.param(store, self.final_ln_g.expect("transformer has final norm"));
        let fb = g.param(store, self.final_ln_b.expect("transformer has final norm"));
        Ok(g.row_layer_norm(x, fg, fb, 1e-5))
    }

    fn attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: &LayerParams,
        x: NodeId,
        rel_idx: Option<&[Vec<usize>]>,
    ) -> NodeId {
        let d = self.config.d_model;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let wq = g.param(store, layer.wq);
        let wk = g.param(store, layer.wk);
        let wv = g.param(store, layer.wv);
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let rel_table = layer.rel_k.map(|pid| {
            let t = g.param(store, pid);
            g.transpose(t) // dh x (2c+1)
        });
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kht = g.transpose(kh);
            let mut scores = g.matmul(qh, kht);
            if let (Some(rt), Some(idx)) = (rel_table, rel_idx) {
                let rel_logits = g.matmul(qh, rt); // n x (2c+1)
                let rel = g.gather_cols_per_row(rel_logits, idx);
                scores = g.add(scores, rel);
            }
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.row_softmax(scaled);
            ctx.push(g.matmul(attn, vh));
        }
        let merged = g.concat_cols(&ctx);
        let wo = g.param(store, layer.wo);
        g.matmul(merged, wo)
    }

    fn feed_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: &LayerParams,
        x: NodeId,
    ) -> NodeId {
        let w1 = g.param(store, layer.ff_w1);
        let b1 = g.param(store, layer.ff_b1);
        let w2 = g.param(store, layer.ff_w2);
        let b2 = g.param(store, layer.ff_b2);
        let pre = match self.config.ff_mode {
            FfMode::Linear => x,
            FfMode::Conv => g.unfold(x, self.config.kernel_size),
        };
        let h1 = g.matmul(pre, w1);
        let h1 = g.add_bias(h1, b1);
        let act = g.relu(h1);
        let h2 = g.matmul(act, w2);
        g.add_bias(h2, b2)
    }

    fn encode_bilstm(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: NodeId,
        n: usize,
        train_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let h = self.config.d_model / 2;
        for (li, layer) in self.lstm_layers.iter().enumerate() {
            if li > 0 {
                x = self.dropout(g, x, train_mode, rng);
            }
            let fwd = self.lstm_direction(g, store, &layer.fwd, x, n, h, false);
            let bwd = self.lstm_direction(g, store, &layer.bwd, x, n, h, true);
            let fwd_stack = g.concat_rows(&fwd);
            let bwd_stack = g.concat_rows(&bwd);
            x = g.concat_cols(&[fwd_stack, bwd_stack]);
        }
        Ok(x)
    }

    /// One LSTM direction; returns hidden rows indexed by original position.
    /// Gate layout inside the 4h block: input, forget, cell, output.
    fn lstm_direction(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dir: &LstmDir,
        x: NodeId,
        n: usize,
        h: usize,
        reverse: bool,
    ) -> Vec<NodeId> {
        let w = g.param(store, dir.w);
        let u = g.param(store, dir.u);
        let b = g.param(store, dir.b);
        let mut hidden = g.input(Tensor::zeros(&[1, h]));
        let mut cell = g.input(Tensor::zeros(&[1, h]));
        let mut states: Vec<Option<NodeId>> = vec![None; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let xt = g.slice_rows(x, t, 1);
            let xw = g.matmul(xt, w);
            let hu = g.matmul(hidden, u);
            let z = g.add(xw, hu);
            let z = g.add_bias(z, b);
            let i_gate = g.slice_cols(z, 0, h);
            let f_gate = g.slice_cols(z, h, h);
            let g_gate = g.slice_cols(z, 2 * h, h);
            let o_gate = g.slice_cols(z, 3 * h, h);
            let i_act = g.sigmoid(i_gate);
            let f_act = g.sigmoid(f_gate);
            let g_act = g.tanh(g_gate);
            let o_act = g.sigmoid(o_gate);
            let keep = g.mul(f_act, cell);
            let write = g.mul(i_act, g_act);
            cell = g.add(keep, write);
            let cell_act = g.tanh(cell);
            hidden = g.mul(o_act, cell_act);
            states[t] = Some(hidden);
        }
        states.into_iter().map(|s| s.expect("every step visited")).collect()
    }
}
