//! Sparse 3D U-Net: strided encoder, shared-index decoder with lateral skips.
//!
//! Layer names (all 3x3x3 unless the arch says otherwise):
//!
//! ```text
//! enc.s{n}.conv0          stage entry; submanifold at n = 1, stride-2 standard conv after
//! enc.s{n}.conv{j}        submanifold, j = 1 .. depth-1
//! dec.s{m}.lateral        submanifold over [x | encoder skip]
//! dec.s{m}.conv1          submanifold
//! dec.s{m}.up             inverse of enc.s{n}.conv0, for every decoder stage but the last
//! ```
//!
//! Decoder stage `m` runs at the resolution of encoder stage `n = stages + 1 - m`.

use super::{build_rulebook, concat_skip, inverse_conv, sparse_conv, ConvMode, ConvSpec, Rulebook, SparseTensor};
use crate::error::{Error, Result};
use crate::weights::WeightStore;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetArch {
    pub in_channels: usize,
    pub enc_depths: Vec<usize>,
    pub enc_widths: Vec<usize>,
    pub dec_widths: Vec<usize>,
    /// Channels handed from the bottleneck bridge to the first decoder stage.
    pub bridge_channels: usize,
    pub kernel: usize,
}

impl Default for UNetArch {
    fn default() -> Self {
        Self {
            in_channels: 16,
            enc_depths: vec![2, 3, 3, 3],
            enc_widths: vec![32, 64, 128, 256],
            dec_widths: vec![128, 64, 32, 32],
            bridge_channels: 256,
            kernel: 3,
        }
    }
}

impl UNetArch {
    pub fn stages(&self) -> usize {
        self.enc_widths.len()
    }

    /// Total encoder downsampling factor.
    pub fn downsample(&self) -> usize {
        1 << (self.stages() - 1)
    }

    pub fn output_channels(&self) -> usize {
        *self.dec_widths.last().expect("validated arch has stages")
    }

    pub fn bottom_channels(&self) -> usize {
        *self.enc_widths.last().expect("validated arch has stages")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages();
        if !(1..=4).contains(&n) {
            return Err(Error::config(format!("encoder needs 1 to 4 stages, got {n}")));
        }
        if self.enc_depths.len() != n || self.dec_widths.len() != n {
            return Err(Error::config(format!(
                "encoder depths ({}), encoder widths ({n}) and decoder widths ({}) must have equal length",
                self.enc_depths.len(),
                self.dec_widths.len()
            )));
        }
        if self.enc_depths.contains(&0) {
            return Err(Error::config("every encoder stage needs depth >= 1"));
        }
        if self.enc_widths.iter().chain(&self.dec_widths).any(|&w| w == 0) || self.in_channels == 0 || self.bridge_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    fn kernel3(&self) -> [usize; 3] {
        [self.kernel; 3]
    }

    fn kvol(&self) -> usize {
        self.kernel.pow(3)
    }

    /// `(name, dims)` of every tensor the network reads.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let kv = self.kvol();
        let mut out = Vec::new();
        let mut push = |name: String, cin: usize, cout: usize| {
            out.push((format!("{name}.weight"), vec![kv, cin, cout]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = self.in_channels;
        for (s, (&depth, &width)) in self.enc_depths.iter().zip(&self.enc_widths).enumerate() {
            push(format!("enc.s{}.conv0", s + 1), cin, width);
            for j in 1..depth {
                push(format!("enc.s{}.conv{j}", s + 1), width, width);
            }
            cin = width;
        }
        let n = self.stages();
        let mut x = self.bridge_channels;
        for (m, &width) in self.dec_widths.iter().enumerate() {
            let skip = self.enc_widths[n - 1 - m];
            push(format!("dec.s{}.lateral", m + 1), x + skip, width);
            push(format!("dec.s{}.conv1", m + 1), width, width);
            if m + 1 < n {
                push(format!("dec.s{}.up", m + 1), width, width);
            }
            x = width;
        }
        out
    }
}

/// Encoder activations per stage plus the rulebooks of the stride-2 entries.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub stage_outputs: Vec<SparseTensor>,
    /// `down_rulebooks[s]` maps stage `s` sites to stage `s + 1` sites.
    pub down_rulebooks: Vec<Rulebook>,
}

impl EncoderState {
    pub fn bottom(&self) -> &SparseTensor {
        self.stage_outputs.last().expect("encoder has at least one stage")
    }
}

#[derive(Debug, Clone)]
pub struct UNetOutput {
    pub decoder_out: SparseTensor,
    pub encoder_bottom: SparseTensor,
    pub rulebooks: Vec<Rulebook>,
}

fn conv_relu(x: &SparseTensor, spec: &ConvSpec, rb: &Rulebook) -> Result<SparseTensor> {
    Ok(sparse_conv(x, spec, rb)?.relu())
}

pub fn encode(input: &SparseTensor, arch: &UNetArch, ws: &WeightStore) -> Result<EncoderState> {
    arch.validate()?;
    if input.channels() != arch.in_channels {
        return Err(Error::config(format!(
            "U-Net expects {} input channels, got {}",
            arch.in_channels,
            input.channels()
        )));
    }
    let k = arch.kernel3();
    let mut stage_outputs = Vec::with_capacity(arch.stages());
    let mut down_rulebooks = Vec::new();
    let mut x = input.clone();
    let mut cin = arch.in_channels;
    for (s, (&depth, &width)) in arch.enc_depths.iter().zip(&arch.enc_widths).enumerate() {
        let name = |j: usize| format!("enc.s{}.conv{j}", s + 1);
        let (subm_rb, entry_out) = if s == 0 {
            let spec = ConvSpec::from_store(ws, &name(0), k, 1, cin, width, ConvMode::Submanifold)?;
            let rb = build_rulebook(&x, &spec)?;
            let y = conv_relu(&x, &spec, &rb)?;
            (rb, y)
        } else {
            let spec = ConvSpec::from_store(ws, &name(0), k, 2, cin, width, ConvMode::Strided)?;
            let rb = build_rulebook(&x, &spec)?;
            let y = conv_relu(&x, &spec, &rb)?;
            down_rulebooks.push(rb);
            let subm = ConvSpec::zeros(k, 1, width, width, ConvMode::Submanifold);
            (build_rulebook(&y, &subm)?, y)
        };
        x = entry_out;
        for j in 1..depth {
            let spec = ConvSpec::from_store(ws, &name(j), k, 1, width, width, ConvMode::Submanifold)?;
            x = conv_relu(&x, &spec, &subm_rb)?;
        }
        stage_outputs.push(x.clone());
        cin = width;
    }
    Ok(EncoderState { stage_outputs, down_rulebooks })
}

pub fn decode(bridge_out: &SparseTensor, enc: &EncoderState, arch: &UNetArch, ws: &WeightStore) -> Result<SparseTensor> {
    let n = arch.stages();
    let k = arch.kernel3();
    if bridge_out.channels() != arch.bridge_channels {
        return Err(Error::config(format!(
            "bridge produced {} channels, decoder expects {}",
            bridge_out.channels(),
            arch.bridge_channels
        )));
    }
    let mut x = bridge_out.clone();
    for (m, &width) in arch.dec_widths.iter().enumerate() {
        let level = n - 1 - m;
        let skip = &enc.stage_outputs[level];
        let joined = concat_skip(&x, skip)?;
        let subm_rb = build_rulebook(&joined, &ConvSpec::zeros(k, 1, 1, 1, ConvMode::Submanifold))?;
        let lateral = ConvSpec::from_store(
            ws,
            &format!("dec.s{}.lateral", m + 1),
            k,
            1,
            joined.channels(),
            width,
            ConvMode::Submanifold,
        )?;
        x = conv_relu(&joined, &lateral, &subm_rb)?;
        let conv1 = ConvSpec::from_store(ws, &format!("dec.s{}.conv1", m + 1), k, 1, width, width, ConvMode::Submanifold)?;
        x = conv_relu(&x, &conv1, &subm_rb)?;
        if level > 0 {
            let up = ConvSpec::from_store(ws, &format!("dec.s{}.up", m + 1), k, 2, width, width, ConvMode::Inverse)?;
            x = inverse_conv(&x, &up, &enc.down_rulebooks[level - 1])?.relu();
        }
    }
    Ok(x)
}

/// Encoder, bottleneck bridge, decoder. The bridge maps the bottom encoder
/// tensor to `arch.bridge_channels` channels on the same sites.
pub fn run_unet_with_bridge<F>(input: &SparseTensor, arch: &UNetArch, ws: &WeightStore, bridge: F) -> Result<UNetOutput>
where
    F: FnOnce(&SparseTensor) -> Result<SparseTensor>,
{
    let enc = encode(input, arch, ws)?;
    let bridged = bridge(enc.bottom())?;
    let decoder_out = decode(&bridged, &enc, arch, ws)?;
    Ok(UNetOutput { decoder_out, encoder_bottom: enc.bottom().clone(), rulebooks: enc.down_rulebooks })
}

/// U-Net with an identity bottleneck.
pub fn run_unet(input: &SparseTensor, arch: &UNetArch, ws: &WeightStore) -> Result<UNetOutput> {
    if arch.bridge_channels != arch.bottom_channels() {
        return Err(Error::config(format!(
            "identity bridge needs bridge_channels ({}) == bottom width ({})",
            arch.bridge_channels,
            arch.bottom_channels()
        )));
    }
    run_unet_with_bridge(input, arch, ws, |b| Ok(b.clone()))
}
