use super::{Dataset, Quantity, WindowSample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Starts of the `floor((len - window) / stride) + 1` windows over a series.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 {
        return Err(Error::Contract("window length and stride must be positive".into()));
    }
    if window > len {
        return Err(Error::Contract(format!(
            "window length {window} exceeds series length {len}"
        )));
    }
    Ok((0..=(len - window) / stride).map(|i| i * stride).collect())
}

/// Raw (unnormalized) windows: `y` holds every aggregate quantity in
/// canonical order, `x` the active power of each appliance.
pub fn make_windows(data: &Dataset, window: usize, stride: usize) -> Result<Vec<WindowSample>> {
    let starts = window_starts(data.len(), window, stride)?;
    let inputs: Vec<&[f32]> = data
        .input_quantities()
        .into_iter()
        .map(|q| data.aggregate.get(q))
        .collect::<Result<_>>()?;
    let targets: Vec<&[f32]> = data
        .appliances
        .iter()
        .map(|a| a.get(Quantity::PowerActive))
        .collect::<Result<_>>()?;
    let gather = |rows: &[&[f32]], start: usize| {
        let data = rows
            .iter()
            .flat_map(|r| r[start..start + window].iter().copied())
            .collect();
        Tensor::new(vec![rows.len(), window], data)
    };
    starts
        .into_iter()
        .map(|s| {
            Ok(WindowSample {
                y: gather(&inputs, s)?,
                x: gather(&targets, s)?,
                window_start: s,
                normalized: false,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MeterSeries;
    use std::collections::BTreeMap;

    #[test]
    fn starts_match_hand_grid() {
        assert_eq!(window_starts(100, 32, 16).unwrap(), vec![0, 16, 32, 48, 64]);
        assert_eq!(window_starts(96, 32, 32).unwrap(), vec![0, 32, 64]);
        assert_eq!(window_starts(32, 32, 5).unwrap(), vec![0]);
        assert!(window_starts(31, 32, 1).is_err());
        assert!(window_starts(31, 4, 0).is_err());
    }

    #[test]
    fn windows_copy_the_right_slices() {
        let ts: Vec<i64> = (0..10).collect();
        let mut agg = BTreeMap::new();
        agg.insert(Quantity::PowerActive, (0..10).map(|v| v as f32).collect());
        agg.insert(Quantity::VoltageRms, (0..10).map(|v| 200.0 + v as f32).collect());
        let mut app = BTreeMap::new();
        app.insert(Quantity::PowerActive, (0..10).map(|v| -(v as f32)).collect());
        let d = Dataset::new(
            MeterSeries::new("agg", ts.clone(), agg).unwrap(),
            vec![MeterSeries::new("a", ts, app).unwrap()],
            vec!["A".into()],
        )
        .unwrap();
        let w = make_windows(&d, 4, 3).unwrap();
        assert_eq!(w.len(), 3);
        // Canonical order puts voltage before active power.
        assert_eq!(w[1].y.data(), &[203., 204., 205., 206., 3., 4., 5., 6.]);
        assert_eq!(w[2].x.data(), &[-6., -7., -8., -9.]);
        assert_eq!(w[2].window_start, 6);
    }
}
