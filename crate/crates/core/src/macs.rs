//! Multiply-accumulate cost model for a forward pass.
//!
//! Conventions: one multiply-accumulate = 1 MAC; convolutions count
//! `Cin*Cout*Kh*Kw*Hout*Wout`, linear layers `L*in*out` over L token rows,
//! and single-head attention `4*L*E^2` for the Q/K/V/O projections plus
//! `2*L^2*E` for score and mixing matmuls. Pooling, resampling, softmax,
//! biases, and activations count zero. The walk mirrors the forward graph
//! of [`crate::arch::IqaModel`] stage by stage.

use crate::arch::ModelConfig;
use crate::backbone::STAGES;
use crate::error::Result;

pub fn conv_macs(cin: usize, cout: usize, k: usize, out_h: usize, out_w: usize) -> u64 {
    (cin * cout * k * k * out_h * out_w) as u64
}

pub fn linear_macs(l: usize, fan_in: usize, fan_out: usize) -> u64 {
    (l * fan_in * fan_out) as u64
}

pub fn attention_macs(l: usize, e: usize) -> u64 {
    4 * linear_macs(l, e, e) + 2 * (l * l * e) as u64
}

pub struct MacsBreakdown {
    /// (module, MACs) in forward order.
    pub entries: Vec<(String, u64)>,
}

impl MacsBreakdown {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|(_, m)| m).sum()
    }

    /// Two-column text table, one module per line plus a total row.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (name, macs) in &self.entries {
            out.push_str(&format!("{name}\t{macs}\n"));
        }
        out.push_str(&format!("total\t{}\n", self.total()));
        out
    }
}

/// MACs of one forward pass at input resolution `h x w`.
pub fn count_macs(cfg: &ModelConfig, h: usize, w: usize) -> Result<MacsBreakdown> {
    cfg.validate()?;
    let g = cfg.grid();
    let (c, d) = (cfg.c_mal, cfg.d);
    let mut entries = Vec::new();

    // Backbone: five stride-2 conv stages, plus token-grid attention when
    // global mixing is on.
    let mut backbone = 0u64;
    let mut cin = 3usize;
    let (mut sh, mut sw) = (h, w);
    let mut level_extents = Vec::with_capacity(STAGES);
    for &cout in &cfg.stage_channels {
        sh = sh.div_ceil(2);
        sw = sw.div_ceil(2);
        backbone += conv_macs(cin, cout, 3, sh, sw);
        if cfg.global_mixing {
            backbone += attention_macs(16, cout);
        }
        level_extents.push((cout, sh, sw));
        cin = cout;
    }
    entries.push(("backbone".to_string(), backbone));

    // LDAs: channel doubling at level resolution (levels below the grid are
    // upsampled to it first), then reduction on the pooled grid.
    let mut lda = 0u64;
    for &(cj, lh, lw) in &level_extents {
        let (lh, lw) = (lh.max(g), lw.max(g));
        lda += conv_macs(cj, 2 * cj, 1, lh, lw);
        lda += conv_macs(2 * cj, c, 1, g, g);
    }
    entries.push(("lda".to_string(), lda));

    let mal_macs = |n: usize| -> u64 {
        let per_input = n as u64 * attention_macs(d, c);
        let feature = attention_macs(d * n, c);
        let channel = attention_macs(c * n, d);
        per_input + feature + channel
    };
    if !cfg.no_mal {
        entries.push((
            "opinion_mals".to_string(),
            cfg.m as u64 * mal_macs(STAGES),
        ));
    }
    let fusion_n = if cfg.no_mal { 1 } else { cfg.m };
    entries.push(("fusion".to_string(), mal_macs(fusion_n)));

    let head = conv_macs(c, cfg.head_c1, 1, g, g)
        + conv_macs(cfg.head_c1, cfg.head_c2, 3, g, g)
        + linear_macs(1, cfg.fc_in, cfg.fc_hidden)
        + linear_macs(1, cfg.fc_hidden, 1);
    entries.push(("head".to_string(), head));

    Ok(MacsBreakdown { entries })
}
