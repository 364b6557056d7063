use crate::image::Mask;

/// A point in continuous pixel coordinates: `x` grows rightwards along
/// columns, `y` downwards along rows. Pixel `(row, col)` has its center at
/// `(col + 0.5, row + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn lerp(self, to: Point, t: f64) -> Point {
        Point::new(self.x + t * (to.x - self.x), self.y + t * (to.y - self.y))
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

pub fn triangle_area(a: Point, b: Point, c: Point) -> f64 {
    ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs() / 2.0
}

/// Even-odd (crossing number) test.
pub fn contains(poly: &[Point], p: Point) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Pixels whose centers fall inside `poly`.
pub fn rasterize(poly: &[Point], height: usize, width: usize) -> Mask {
    Mask::from_fn(height, width, |r, c| {
        contains(poly, Point::new(c as f64 + 0.5, r as f64 + 0.5))
    })
}

/// Pixels whose centers fall inside the axis-aligned ellipse.
pub fn rasterize_ellipse(center: Point, rx: f64, ry: f64, height: usize, width: usize) -> Mask {
    Mask::from_fn(height, width, |r, c| {
        let dx = (c as f64 + 0.5 - center.x) / rx;
        let dy = (r as f64 + 0.5 - center.y) / ry;
        dx * dx + dy * dy <= 1.0
    })
}
