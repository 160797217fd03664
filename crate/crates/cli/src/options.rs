use clap::Args;
use mmpipe_core::config::{
    DEFAULT_MAX_PIXELS, DEFAULT_MIN_PIXELS, DEFAULT_PACK_WINDOW, DEFAULT_SEQUENCE_LENGTH,
};
use mmpipe_core::{PackWindow, PipelineConfig, Preset, Result, VisualCap};

/// Packing settings shared by `pack`, `resume` and `stats`.
#[derive(Args, Debug, Clone)]
pub struct PackOptions {
    /// Named SFT budget: sft-2k, sft-4k or sft-8k
    #[arg(long, value_parser = parse_preset, conflicts_with_all = ["seq_len", "max_pixels"])]
    pub preset: Option<Preset>,

    /// Tokens per pack [default: 8192]
    #[arg(long)]
    pub seq_len: Option<u64>,

    /// Lower bound on resized image area, in pixels; accepts products like 4*28*28 [default: 3136]
    #[arg(long, value_parser = parse_pixels)]
    pub min_pixels: Option<u64>,

    /// Upper bound on resized image area, in pixels [default: 1003520]
    #[arg(long, value_parser = parse_pixels)]
    pub max_pixels: Option<u64>,

    /// Visual tokens allowed per pack, or "unlimited" [default: seq-len / 2]
    #[arg(long, value_parser = parse_visual_cap)]
    pub visual_cap: Option<VisualCap>,

    /// Open packs kept by the online packer, or "unbounded"
    #[arg(long, value_parser = parse_window, default_value_t = PackWindow::Bounded(DEFAULT_PACK_WINDOW).into())]
    pub window: WindowArg,
}

impl PackOptions {
    pub fn config(&self) -> Result<PipelineConfig> {
        let (seq_len, max_pixels) = match self.preset {
            Some(p) => (p.sequence_length(), p.max_pixels()),
            None => (
                self.seq_len.unwrap_or(DEFAULT_SEQUENCE_LENGTH),
                self.max_pixels.unwrap_or(DEFAULT_MAX_PIXELS),
            ),
        };
        let mut cfg = PipelineConfig::with_budget(seq_len, max_pixels);
        cfg.min_pixels = self.min_pixels.unwrap_or(DEFAULT_MIN_PIXELS);
        if let Some(cap) = self.visual_cap {
            cfg.visual_token_cap = cap;
        }
        cfg.pack_window = self.window.0;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Clap-friendly wrapper so the default renders as text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowArg(pub PackWindow);

impl From<PackWindow> for WindowArg {
    fn from(w: PackWindow) -> Self {
        Self(w)
    }
}

impl std::fmt::Display for WindowArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            PackWindow::Bounded(n) => write!(f, "{n}"),
            PackWindow::Unbounded => f.write_str("unbounded"),
        }
    }
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    Preset::from_name(s).ok_or_else(|| format!("unknown preset '{s}' (sft-2k, sft-4k, sft-8k)"))
}

/// A positive integer or a product of them, e.g. `1280*28*28`.
pub fn parse_pixels(s: &str) -> std::result::Result<u64, String> {
    let mut value = 1u64;
    for factor in s.split('*') {
        let f: u64 = factor
            .trim()
            .parse()
            .map_err(|_| format!("'{s}' is not a pixel count"))?;
        value = value.checked_mul(f).ok_or_else(|| format!("'{s}' overflows"))?;
    }
    Ok(value)
}

fn parse_visual_cap(s: &str) -> std::result::Result<VisualCap, String> {
    if s.eq_ignore_ascii_case("unlimited") {
        return Ok(VisualCap::Unlimited);
    }
    s.parse()
        .map(VisualCap::Tokens)
        .map_err(|_| format!("'{s}' is neither a token count nor \"unlimited\""))
}

fn parse_window(s: &str) -> std::result::Result<WindowArg, String> {
    if s.eq_ignore_ascii_case("unbounded") {
        return Ok(WindowArg(PackWindow::Unbounded));
    }
    s.parse()
        .map(|n| WindowArg(PackWindow::Bounded(n)))
        .map_err(|_| format!("'{s}' is neither a pack count nor \"unbounded\""))
}
