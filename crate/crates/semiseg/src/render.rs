//! PNG rendering of sample channels.

use std::str::FromStr;

use semiseg_core::sample::Sample;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Height,
    Range,
    Intensity,
    /// Height, range and intensity as red, green and blue.
    Composite,
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "height" => Ok(Channel::Height),
            "range" => Ok(Channel::Range),
            "intensity" => Ok(Channel::Intensity),
            "composite" => Ok(Channel::Composite),
            other => Err(format!("unknown channel {other:?}")),
        }
    }
}

impl Channel {
    fn index(self) -> Option<usize> {
        match self {
            Channel::Height => Some(0),
            Channel::Range => Some(1),
            Channel::Intensity => Some(2),
            Channel::Composite => None,
        }
    }
}

/// Encodes one channel as 8-bit grayscale, or all three as RGB.
pub fn render_png(sample: &Sample, channel: Channel) -> Vec<u8> {
    let n = sample.canvas as u32;
    let (color, data) = match channel.index() {
        Some(c) => (png::ColorType::Grayscale, sample.channel(c).to_vec()),
        None => {
            let (h, r, i) = (sample.channel(0), sample.channel(1), sample.channel(2));
            let rgb = (0..h.len()).flat_map(|k| [h[k], r[k], i[k]]).collect();
            (png::ColorType::Rgb, rgb)
        }
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, n, n);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        // Writing into a Vec with consistent dimensions cannot fail.
        let mut w = enc.write_header().expect("png header");
        w.write_image_data(&data).expect("png data");
    }
    out
}
