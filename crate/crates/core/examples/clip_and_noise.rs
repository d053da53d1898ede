//! Clipping a heavy-tailed sample and checking its moment bound.

use htbilevel::noise::{clip, empirical_central_moment, NoiseModel, RngStream};

fn main() -> htbilevel::Result<()> {
    let noise = NoiseModel::shifted_pareto(1.5, 1.0, 1.4)?;
    let stream = RngStream::new(0, 1);
    let v = noise.sample(5, &stream)?;
    let c = clip(&v, 2.0)?;
    println!("sample norm {:.3}, clipped norm {:.3}", v.norm(), c.norm());

    let moment = empirical_central_moment(&noise, noise.p(), 5, 100_000, &stream)?;
    let bound = noise.sigma_for_dim(5).powf(noise.p());
    println!("E|xi|^p ~ {moment:.3} <= declared {bound:.3}");
    Ok(())
}
