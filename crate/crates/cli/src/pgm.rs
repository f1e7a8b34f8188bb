//! Plain-text (P2) portable graymap encoding.

/// 8-bit level of an intensity in `[0, 1]` (values outside are clamped).
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Encodes a row-major `width × height` image as an ASCII P2 file, one
/// image row per line.
pub fn encode(pixels: &[f64], width: usize, height: usize) -> String {
    assert_eq!(
        pixels.len(),
        width * height,
        "pixel buffer does not match {width}×{height}"
    );
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in pixels.chunks(width) {
        let line: Vec<String> = row.iter().map(|&v| quantize(v).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
