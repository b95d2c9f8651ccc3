//! Plain (ASCII, `P2`) 8-bit graymaps.

use std::fmt::Write as _;

/// Gray level of class `label` out of `num_classes`, evenly spaced over 0..=255.
pub fn label_gray(label: u8, num_classes: usize) -> u8 {
    if num_classes < 2 {
        return 0;
    }
    ((usize::from(label) * 255) as f64 / (num_classes - 1) as f64).round() as u8
}

/// Maps an intensity in `[0, 1]` to 0..=255, clamping outside values.
pub fn intensity_gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a row-major image. `comment` lines are written after the magic.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8], comment: &str) -> String {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut s = String::from("P2\n");
    for line in comment.lines() {
        let _ = writeln!(s, "# {line}");
    }
    let _ = writeln!(s, "{width} {height}\n255");
    for row in pixels.chunks(width.max(1)) {
        // Plain PGM lines should stay under 70 characters.
        for chunk in row.chunks(16) {
            let line: Vec<String> = chunk.iter().map(u8::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
    }
    s
}

/// Parses a plain PGM into `(width, height, pixels)`, rescaling to 0..=255
/// if the file's maximum differs.
pub fn decode_pgm(text: &str) -> Result<(usize, usize, Vec<u8>), String> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err("not a plain PGM".into());
    }
    let mut num = || -> Result<usize, String> {
        tokens
            .next()
            .ok_or("unexpected end of file")?
            .parse()
            .map_err(|e| format!("bad number: {e}"))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max == 0 || max > 65535 {
        return Err(format!("bad maxval {max}"));
    }
    let pixels = (0..w * h)
        .map(|_| num().map(|v| (v * 255 / max) as u8))
        .collect::<Result<_, _>>()?;
    Ok((w, h, pixels))
}
