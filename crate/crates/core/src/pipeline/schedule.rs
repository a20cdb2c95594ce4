use crate::error::{Error, Result};

const ANGLE_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduledView {
    /// Degrees in `(-180, 180]`.
    pub azimuth: f64,
    /// Indices of earlier views this one is compared against.
    pub neighbors: Vec<usize>,
}

/// Orbit order: the reference at 0, then alternating positive and negative
/// steps of `interval`, closing at 180 where the two chains meet.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSchedule {
    pub interval: f64,
    pub elevation: f64,
    pub views: Vec<ScheduledView>,
}

impl ViewSchedule {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn azimuths(&self) -> Vec<f64> {
        self.views.iter().map(|v| v.azimuth).collect()
    }

    pub fn neighbor_azimuths(&self, i: usize) -> Vec<f64> {
        self.views[i].neighbors.iter().map(|&j| self.views[j].azimuth).collect()
    }
}

pub fn build_schedule(interval: f64, elevation: f64) -> Result<ViewSchedule> {
    if !(interval > 0.0 && interval <= 180.0) {
        return Err(Error::invalid(format!(
            "view interval must be in (0, 180], got {interval}"
        )));
    }
    if !(elevation.abs() < 90.0) {
        return Err(Error::invalid(format!(
            "elevation must be in (-90, 90), got {elevation}"
        )));
    }
    let mut views = vec![ScheduledView {
        azimuth: 0.0,
        neighbors: Vec::new(),
    }];
    // chain heads: index of the last view placed on each side
    let (mut pos_head, mut neg_head) = (0, 0);
    let mut k = 1;
    while k as f64 * interval < 180.0 - ANGLE_EPS {
        let a = k as f64 * interval;
        views.push(ScheduledView {
            azimuth: a,
            neighbors: vec![pos_head],
        });
        pos_head = views.len() - 1;
        views.push(ScheduledView {
            azimuth: -a,
            neighbors: vec![neg_head],
        });
        neg_head = views.len() - 1;
        k += 1;
    }
    let mut junction = vec![pos_head, neg_head];
    junction.dedup();
    views.push(ScheduledView {
        azimuth: 180.0,
        neighbors: junction,
    });
    Ok(ViewSchedule {
        interval,
        elevation,
        views,
    })
}
