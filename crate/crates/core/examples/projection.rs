//! Scaled projection onto a box with a fixed sum, checked against bisection.

use blind_deconv::projection::{project, project_oracle, ProjectionProblem, DEFAULT_TOL};
use blind_deconv::{Bound, ConstraintSpec};

fn main() -> blind_deconv::Result<()> {
    let point = [0.9, -0.4, 0.3, 1.7, 0.05];
    let scaling = [1.0, 0.5, 2.0, 4.0, 0.25];
    let cons = ConstraintSpec::new(Bound::Scalar(0.0), Bound::Scalar(0.6), 1.0, point.len())?;
    let prob = ProjectionProblem::new(&point, &scaling, &cons)?;

    let y = project(&prob, DEFAULT_TOL)?;
    let oracle = project_oracle(&prob);
    println!("point      {point:?}");
    println!("projection {y:.6?}");
    println!("bisection  {oracle:.6?}");
    println!("sum        {:.12}", y.iter().sum::<f64>());
    let (box_v, sum_v) = cons.violation(&y);
    println!("violations box {box_v:.1e}, sum {sum_v:.1e}");
    Ok(())
}
