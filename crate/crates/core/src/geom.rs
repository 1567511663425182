//! Axis-aligned boxes and the crop transform shared by the assembly and
//! tracking layers. One box type serves both absolute-pixel and
//! search-normalized coordinates; the frame of reference is contextual.

/// [x_min, y_min, x_max, y_max].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box2 {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2 {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Box2 {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Box2::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn center_distance(&self, other: &Box2) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    pub fn iou(&self, other: &Box2) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clamp into [0,0,w,h] keeping at least `min_size` of extent per axis.
    pub fn clamp_to(&self, w: f64, h: f64, min_size: f64) -> Box2 {
        let x_min = self.x_min.clamp(0.0, w - min_size);
        let y_min = self.y_min.clamp(0.0, h - min_size);
        let x_max = self.x_max.clamp(x_min + min_size, w);
        let y_max = self.y_max.clamp(y_min + min_size, h);
        Box2::new(x_min, y_min, x_max, y_max)
    }
}

/// Invertible map between absolute pixel coordinates and the [0,1]^2
/// coordinate frame of a square crop window. The window may extend past
/// the source frame; out-of-frame samples replicate the nearest edge pixel
/// and the overhang per side is recorded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    /// Window origin in absolute pixels.
    pub x0: f64,
    pub y0: f64,
    /// Window side length in absolute pixels (> 0).
    pub side: f64,
    /// Overhang beyond the source frame, absolute pixels: [left, top, right, bottom].
    pub padding: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformError {
    DegenerateScale,
}

impl std::fmt::Display for TransformError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransformError::DegenerateScale => write!(f, "crop window has non-positive side"),
        }
    }
}

impl std::error::Error for TransformError {}

impl CropTransform {
    pub fn new(x0: f64, y0: f64, side: f64, padding: [f64; 4]) -> Result<Self, TransformError> {
        if !(side > 0.0) || !side.is_finite() {
            return Err(TransformError::DegenerateScale);
        }
        Ok(CropTransform {
            x0,
            y0,
            side,
            padding,
        })
    }

    /// Absolute box -> crop-normalized box. No clamping: coordinates outside
    /// the window map outside [0,1], which the dilated vocabulary absorbs.
    pub fn abs_to_norm(&self, b: &Box2) -> Box2 {
        Box2::new(
            (b.x_min - self.x0) / self.side,
            (b.y_min - self.y0) / self.side,
            (b.x_max - self.x0) / self.side,
            (b.y_max - self.y0) / self.side,
        )
    }

    pub fn norm_to_abs(&self, b: &Box2) -> Box2 {
        Box2::new(
            self.x0 + b.x_min * self.side,
            self.y0 + b.y_min * self.side,
            self.x0 + b.x_max * self.side,
            self.y0 + b.y_max * self.side,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_hand_geometry() {
        let a = Box2::new(0.0, 0.0, 2.0, 2.0);
        let b = Box2::new(1.0, 0.0, 3.0, 2.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_disjoint_and_identical() {
        let a = Box2::new(0.0, 0.0, 1.0, 1.0);
        let b = Box2::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(a.iou(&b), 0.0);
        assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transform_window_normalizes_to_unit() {
        let t = CropTransform::new(100.0, 100.0, 128.0, [0.0; 4]).unwrap();
        let window = Box2::new(100.0, 100.0, 228.0, 228.0);
        let n = t.abs_to_norm(&window);
        assert_eq!(n, Box2::new(0.0, 0.0, 1.0, 1.0));
        let inner = Box2::new(164.0, 164.0, 196.0, 196.0);
        assert_eq!(t.abs_to_norm(&inner), Box2::new(0.5, 0.5, 0.75, 0.75));
    }

    #[test]
    fn transform_round_trip() {
        let t = CropTransform::new(13.5, -2.0, 77.0, [0.0; 4]).unwrap();
        let b = Box2::new(20.0, 3.0, 55.5, 41.0);
        let back = t.norm_to_abs(&t.abs_to_norm(&b));
        for (x, y) in b.coords().iter().zip(back.coords().iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_scale_rejected() {
        assert!(CropTransform::new(0.0, 0.0, 0.0, [0.0; 4]).is_err());
    }

    #[test]
    fn clamp_keeps_minimum_extent() {
        let b = Box2::new(-5.0, -5.0, -4.0, -4.0);
        let c = b.clamp_to(100.0, 100.0, 1.0);
        assert!(c.is_valid());
        assert!(c.x_min >= 0.0 && c.y_min >= 0.0);
    }
}
