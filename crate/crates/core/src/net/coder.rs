//! Regression codes relating an anchor to a box.
//!
//! With anchor `(x, y, w, h)` and target `(x', y', w', h', θ')`:
//!
//! ```text
//! l_x = (x - x') / w'     s_w = ln(w / w')     a_sin = sin θ'
//! l_y = (y - y') / h'     s_h = ln(h / h')     a_cos = cos θ'
//! ```
//!
//! Offsets are normalised by the target's own size, so decoding recovers
//! the size first and then the centre.

use crate::geom::{normalize_angle, RotatedBox};

pub const CODE_LEN: usize = 6;

/// Log-size codes are clamped to this magnitude when decoding.
const MAX_LOG_SCALE: f64 = 12.0;

pub fn encode(anchor: &RotatedBox, gt: &RotatedBox) -> [f64; CODE_LEN] {
    let (s, c) = gt.theta.sin_cos();
    [
        (anchor.cx - gt.cx) / gt.w,
        (anchor.cy - gt.cy) / gt.h,
        (anchor.w / gt.w).ln(),
        (anchor.h / gt.h).ln(),
        s,
        c,
    ]
}

pub fn decode(anchor: &RotatedBox, code: &[f64]) -> RotatedBox {
    let w = anchor.w * (-code[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE)).exp();
    let h = anchor.h * (-code[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE)).exp();
    RotatedBox {
        cx: anchor.cx - code[0] * w,
        cy: anchor.cy - code[1] * h,
        w,
        h,
        theta: normalize_angle(code[4].atan2(code[5])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, LN_2, PI};

    fn bx(cx: f64, cy: f64, w: f64, h: f64, t: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, w, h, t).unwrap()
    }

    #[test]
    fn identical_boxes_encode_to_zero_offsets() {
        let a = bx(1.0, 2.0, 3.0, 4.0, 0.0);
        assert_eq!(encode(&a, &a), [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn hand_case() {
        let code = encode(&bx(0.0, 0.0, 5.0, 5.0, 0.0), &bx(1.0, 0.0, 5.0, 10.0, 0.0));
        let expected = [-0.2, 0.0, 0.0, -LN_2, 0.0, 1.0];
        for (a, b) in code.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let back = decode(&bx(0.0, 0.0, 5.0, 5.0, 0.0), &expected);
        assert_abs_diff_eq!(back.cx, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back.cy, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back.w, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back.h, 10.0, epsilon = 1e-12);
        assert_eq!(back.theta, 0.0);
    }

    #[test]
    fn heading_from_sin_cos() {
        let a = bx(0.0, 0.0, 5.0, 5.0, 0.0);
        assert_eq!(decode(&a, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).theta, 0.0);
        assert_abs_diff_eq!(decode(&a, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).theta, FRAC_PI_2);
        let back = encode(&a, &bx(0.0, 0.0, 2.0, 4.0, PI));
        assert_abs_diff_eq!(back[4], 0.0, epsilon = 1e-15);
        assert_eq!(back[5], -1.0);
    }
}
