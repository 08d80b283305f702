//! Binary voxelisation of an event window into a `[T, 2, H, W]` pseudo-frame.

use super::{DataError, EventStream};
use crate::labels::ClassMap;
use crate::tensor::Tensor;

/// Network input for one labelled window.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoFrame {
    /// `[T, 2, H, W]`, exactly {0, 1}.
    pub spikes: Tensor<f32>,
    pub label: ClassMap,
}

/// Map a window `[start, start + duration]` onto `timesteps` equal time bins
/// and rescale coordinates from `src` to `dst` (both `(width, height)`).
///
/// A cell is 1 when at least one event lands in it. An event exactly at
/// `start + duration` falls into the last bin.
pub fn voxelize(
    window: &EventStream,
    start: u64,
    duration: u64,
    src: (usize, usize),
    dst: (usize, usize),
    timesteps: usize,
) -> Result<Tensor<f32>, DataError> {
    let ((sw, sh), (dw, dh)) = (src, dst);
    if duration == 0 || timesteps == 0 || sw == 0 || sh == 0 || dw == 0 || dh == 0 {
        return Err(DataError::Invalid(format!(
            "voxelize needs positive duration, timesteps and sizes (got D={duration}, T={timesteps}, src={sw}x{sh}, dst={dw}x{dh})"
        )));
    }
    let end = start.saturating_add(duration);
    let mut out = Tensor::zeros(&[timesteps, 2, dh, dw]);
    let data = out.data_mut();
    for e in window.events() {
        if e.t < start || e.t > end {
            return Err(DataError::OutsideWindow { t: e.t, start, end });
        }
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= sw || y >= sh {
            return Err(DataError::OutOfBounds {
                x: e.x,
                y: e.y,
                width: sw,
                height: sh,
            });
        }
        let bin = ((e.t - start) as u128 * timesteps as u128 / duration as u128) as usize;
        let bin = bin.min(timesteps - 1);
        let xd = x * dw / sw;
        let yd = y * dh / sh;
        data[((bin * 2 + e.p.channel()) * dh + yd) * dw + xd] = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Event, Polarity};
    use proptest::prelude::*;

    fn ev(t: u64, x: u16, y: u16, p: Polarity) -> Event {
        Event::new(t, x, y, p)
    }

    #[test]
    fn origin_event_sets_first_cell_only() {
        let s = EventStream::new(vec![ev(100, 0, 0, Polarity::Positive)]);
        let v = voxelize(&s, 100, 50_000, (346, 200), (64, 64), 20).unwrap();
        assert_eq!(v.shape(), &[20, 2, 64, 64]);
        assert_eq!(v.data()[0], 1.0);
        assert_eq!(v.count_nonzero(), 1);
    }

    #[test]
    fn last_microsecond_lands_in_last_bin() {
        let s = EventStream::new(vec![ev(49_999, 3, 3, Polarity::Negative), ev(50_000, 3, 3, Polarity::Positive)]);
        let v = voxelize(&s, 0, 50_000, (64, 64), (64, 64), 20).unwrap();
        // floor(49999 * 20 / 50000) = 19; the boundary event clamps to 19 too
        let at = |c: usize| v.data()[((19 * 2 + c) * 64 + 3) * 64 + 3];
        assert_eq!((at(0), at(1)), (1.0, 1.0));
        assert_eq!(v.count_nonzero(), 2);
    }

    #[test]
    fn coincident_events_are_or_combined() {
        let s = EventStream::new(vec![ev(10, 7, 7, Polarity::Positive), ev(11, 6, 6, Polarity::Positive)]);
        let v = voxelize(&s, 0, 50_000, (128, 128), (64, 64), 20).unwrap();
        assert_eq!(v.count_nonzero(), 1);
        assert_eq!(v.max_value(), Some(1.0));
    }

    #[test]
    fn out_of_sensor_event_rejected() {
        let s = EventStream::new(vec![ev(0, 346, 0, Polarity::Positive)]);
        assert!(matches!(
            voxelize(&s, 0, 50_000, (346, 200), (64, 64), 20),
            Err(DataError::OutOfBounds { x: 346, .. })
        ));
        let late = EventStream::new(vec![ev(60_000, 0, 0, Polarity::Positive)]);
        assert!(matches!(voxelize(&late, 0, 50_000, (346, 200), (64, 64), 20), Err(DataError::OutsideWindow { .. })));
    }

    fn arb_events() -> impl Strategy<Value = Vec<(u64, u16, u16, bool)>> {
        prop::collection::vec((0u64..50_000, 0u16..346, 0u16..200, any::<bool>()), 0..200)
    }

    fn stream(raw: &[(u64, u16, u16, bool)], shift: u64) -> EventStream {
        EventStream::new(
            raw.iter()
                .map(|&(t, x, y, pos)| {
                    ev(t + shift, x, y, if pos { Polarity::Positive } else { Polarity::Negative })
                })
                .collect(),
        )
    }

    proptest! {
        #[test]
        fn binary_and_contained(raw in arb_events()) {
            let s = stream(&raw, 0);
            let v = voxelize(&s, 0, 50_000, (346, 200), (64, 64), 20).unwrap();
            prop_assert!(v.is_binary());
            // each event owns one valid cell, so occupancy never exceeds the event count
            prop_assert!(v.count_nonzero() <= raw.len());
            prop_assert_eq!(v.count_nonzero() == 0, raw.is_empty());
        }

        #[test]
        fn shifting_time_is_equivariant(raw in arb_events(), shift in 0u64..1_000_000_000) {
            let a = voxelize(&stream(&raw, 0), 0, 50_000, (346, 200), (64, 64), 20).unwrap();
            let b = voxelize(&stream(&raw, shift), shift, 50_000, (346, 200), (64, 64), 20).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
