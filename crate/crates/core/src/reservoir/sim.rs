//! Incompressible two-phase (water/oil) polymer-flooding simulator on a 2D
//! Cartesian grid.
//!
//! Each control step is split into a few pressure updates (IMPES). A pressure
//! update solves the five-point finite-volume system with harmonic
//! transmissibilities and cell-averaged total mobility, then water saturation
//! and polymer mass are advanced by explicit upwind transport in substeps that
//! respect the stability limits. Wells are rate controlled. In a closed deck
//! the flow is incompressible, so the field rate of a step is the smaller of
//! total injection and total production target, and each well receives its
//! share in proportion to its target. A deck with an aquifer applies the
//! targets as given; the outer boundary is then held at the aquifer pressure
//! and supplies water or takes up fluid as needed.

use super::deck::{ControlType, Deck, WellKind, BAR, CENTIPOISE, MILLIDARCY};
use crate::controls::ControlVector;
use crate::error::{Error, Result};

const SECONDS_PER_DAY: f64 = 86_400.0;
const SATURATION_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    /// End time of each control step, days.
    pub times_days: Vec<f64>,
    pub step_days: Vec<f64>,
    /// Per-step field totals: oil, water and gas produced (sm³), water injected
    /// (sm³), polymer injected and produced (kg).
    pub q_op: Vec<f64>,
    pub q_wp: Vec<f64>,
    pub q_gp: Vec<f64>,
    pub q_wi: Vec<f64>,
    pub q_pi: Vec<f64>,
    pub q_pp: Vec<f64>,
    /// Per step, per well: applied rate (sm³/day) and mean bottom-hole pressure (bar).
    pub well_rates: Vec<Vec<f64>>,
    pub bhp_bar: Vec<Vec<f64>>,
    /// Run totals through the aquifer boundary (sm³, kg).
    pub aquifer_water_in: f64,
    pub aquifer_water_out: f64,
    pub aquifer_oil_out: f64,
    pub aquifer_polymer_out: f64,
    /// Water balance over the run, all sources and sinks included, relative
    /// to the largest water throughput (at least 1 sm³).
    pub water_residual: f64,
    /// Same for polymer mass including adsorbed polymer.
    pub polymer_residual: f64,
    pub min_saturation: f64,
    pub max_saturation: f64,
    pub min_concentration: f64,
    pub substeps: usize,
    /// Per well: first time the producer's water cut exceeded the threshold.
    pub breakthrough_days: Vec<Option<f64>>,
    pub final_saturation: Vec<f64>,
    pub final_concentration: Vec<f64>,
}

impl SimulationResult {
    pub fn n_steps(&self) -> usize {
        self.times_days.len()
    }
}

struct Face {
    a: usize,
    b: usize,
    /// Geometric transmissibility times seconds per day.
    trans: f64,
}

struct WellCell {
    cell: usize,
    kind: WellKind,
    /// Peaceman well index times seconds per day.
    index: f64,
}

/// Largest `df/dS` of the normalised Corey fractional flow, tabulated over
/// `log10` of the mobility ratio.
struct FractionalFlowBound {
    log_min: f64,
    step: f64,
    values: Vec<f64>,
    n_water: f64,
    n_oil: f64,
}

fn corey(s: f64, n: f64) -> f64 {
    if n == 2.0 {
        s * s
    } else if n.fract() == 0.0 {
        s.powi(n as i32)
    } else {
        s.powf(n)
    }
}

impl FractionalFlowBound {
    fn new(n_water: f64, n_oil: f64) -> Self {
        let (log_min, log_max, step) = (-6.0, 6.0, 0.05);
        let n = ((log_max - log_min) / step) as usize + 1;
        let mut table = Self { log_min, step, values: Vec::with_capacity(n), n_water, n_oil };
        for i in 0..n {
            let m = 10f64.powf(log_min + step * i as f64);
            table.values.push(table.direct(m));
        }
        table
    }

    /// Sampled maximum with a margin for the sampling resolution.
    fn direct(&self, m: f64) -> f64 {
        let samples = 2000;
        let (nw, no) = (self.n_water, self.n_oil);
        let mut best = 0.0_f64;
        for k in 0..=samples {
            let s = k as f64 / samples as f64;
            let a = corey(s, nw);
            let b = m * corey(1.0 - s, no);
            let da = if s > 0.0 { nw * a / s } else if nw == 1.0 { 1.0 } else { 0.0 };
            let db = if s < 1.0 { -no * b / (1.0 - s) } else if no == 1.0 { -m } else { 0.0 };
            let den = (a + b) * (a + b);
            if den > 0.0 {
                best = best.max((da * b - a * db) / den);
            }
        }
        best * 1.05
    }

    fn max_slope(&self, m: f64) -> f64 {
        let x = (m.log10() - self.log_min) / self.step;
        if !(x >= 0.0) || x >= (self.values.len() - 1) as f64 {
            return self.direct(m);
        }
        let i = x as usize;
        self.values[i].max(self.values[i + 1])
    }
}

/// Banded Cholesky factor of an SPD matrix with half-bandwidth `bw`.
struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    /// `band[i*(bw+1) + k]` holds `A[i][i−k]`.
    fn factor(n: usize, bw: usize, mut band: Vec<f64>) -> Result<Self> {
        let w = bw + 1;
        for i in 0..n {
            let jmin = i.saturating_sub(bw);
            for j in jmin..=i {
                let mut s = band[i * w + (i - j)];
                let mmin = jmin.max(j.saturating_sub(bw));
                for m in mmin..j {
                    s -= band[i * w + (i - m)] * band[j * w + (j - m)];
                }
                if j == i {
                    if !(s > 0.0) {
                        return Err(Error::Numerical(format!("pressure matrix not positive definite at row {i}")));
                    }
                    band[i * w] = s.sqrt();
                } else {
                    band[i * w + (i - j)] = s / band[j * w];
                }
            }
        }
        Ok(Self { n, bw, l: band })
    }

    fn solve(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let mut s = b[i];
            for j in i.saturating_sub(self.bw)..i {
                s -= self.l[i * w + (i - j)] * b[j];
            }
            b[i] = s / self.l[i * w];
        }
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for j in i + 1..(i + self.bw + 1).min(self.n) {
                s -= self.l[j * w + (j - i)] * b[j];
            }
            b[i] = s / self.l[i * w];
        }
    }
}

/// A deck prepared for repeated simulation. Cheap to share between threads.
pub struct Simulator {
    deck: Deck,
    porosity: Vec<f64>,
    bulk_volume: f64,
    faces: Vec<Face>,
    wells: Vec<WellCell>,
    /// `(cell, transmissibility × seconds per day)` to the aquifer.
    boundary: Vec<(usize, f64)>,
    aquifer_pressure: f64,
    bandwidth: usize,
    pin: Option<usize>,
    slope: FractionalFlowBound,
    control_types: Vec<(usize, ControlType)>,
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator").field("deck", &self.deck.name).finish()
    }
}

struct CellMobility {
    water: Vec<f64>,
    oil: Vec<f64>,
    frac: Vec<f64>,
    slope: Vec<f64>,
}

impl Simulator {
    pub fn new(deck: Deck) -> Result<Self> {
        deck.validate()?;
        let g = &deck.grid;
        let porosity = deck.rock.porosity.realize(g)?;
        let perm: Vec<f64> = deck.rock.permeability_md.realize(g)?.iter().map(|k| k * MILLIDARCY).collect();
        let mut faces = Vec::new();
        let harmonic = |k1: f64, k2: f64| 2.0 * k1 * k2 / (k1 + k2);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let i = g.index(ix, iy);
                if ix + 1 < g.nx {
                    let j = g.index(ix + 1, iy);
                    let t = harmonic(perm[i], perm[j]) * g.dy * g.dz / g.dx;
                    faces.push(Face { a: i, b: j, trans: t * SECONDS_PER_DAY });
                }
                if iy + 1 < g.ny {
                    let j = g.index(ix, iy + 1);
                    let t = harmonic(perm[i], perm[j]) * g.dx * g.dz / g.dy;
                    faces.push(Face { a: i, b: j, trans: t * SECONDS_PER_DAY });
                }
            }
        }
        let mut boundary = Vec::new();
        if let Some(aq) = &deck.aquifer {
            for iy in 0..g.ny {
                for ix in 0..g.nx {
                    let i = g.index(ix, iy);
                    let sides_x = (ix == 0) as usize + (ix + 1 == g.nx) as usize;
                    let sides_y = (iy == 0) as usize + (iy + 1 == g.ny) as usize;
                    let t = sides_x as f64 * perm[i] * g.dy * g.dz / (0.5 * g.dx)
                        + sides_y as f64 * perm[i] * g.dx * g.dz / (0.5 * g.dy);
                    if t > 0.0 {
                        boundary.push((i, aq.strength * t * SECONDS_PER_DAY));
                    }
                }
            }
        }
        let aquifer_pressure = deck.aquifer.as_ref().and_then(|a| a.pressure_bar).unwrap_or(deck.fluid.initial_pressure_bar) * BAR;
        let r0 = 0.14 * (g.dx * g.dx + g.dy * g.dy).sqrt();
        let wells: Vec<WellCell> = deck
            .wells
            .iter()
            .map(|w| {
                let cell = g.index(w.ix, w.iy);
                let index = 2.0 * std::f64::consts::PI * perm[cell] * g.dz / (r0 / w.radius_m).ln() * SECONDS_PER_DAY;
                WellCell { cell, kind: w.kind, index }
            })
            .collect();
        let well_cells: Vec<usize> = wells.iter().map(|w| w.cell).collect();
        let pin = if boundary.is_empty() { Some((0..g.n_cells()).find(|c| !well_cells.contains(c)).unwrap_or(0)) } else { None };
        let bandwidth = if g.ny > 1 { g.nx } else { 1 };
        let slope = FractionalFlowBound::new(deck.fluid.n_water, deck.fluid.n_oil);
        let control_types = deck.control_types();
        Ok(Self {
            porosity,
            bulk_volume: g.cell_volume(),
            faces,
            wells,
            boundary,
            aquifer_pressure,
            bandwidth,
            pin,
            slope,
            control_types,
            deck,
        })
    }

    pub fn deck(&self) -> &Deck {
        &self.deck
    }

    pub fn porosity(&self) -> &[f64] {
        &self.porosity
    }

    /// Dissolved concentration and adsorbed amount from polymer mass per bulk volume.
    fn partition(&self, mass_per_bulk: f64, phi: f64, sw: f64) -> (f64, f64) {
        let p = &self.deck.polymer;
        let a = phi * sw * (1.0 - p.dead_pore_space);
        let b = p.rock_density * (1.0 - phi);
        if mass_per_bulk <= 0.0 {
            return (0.0, 0.0);
        }
        if p.max_adsorption == 0.0 || b == 0.0 {
            return (mass_per_bulk / a, 0.0);
        }
        let k = p.max_adsorption / p.adsorption_saturation;
        let cap_mass = (a + b * k) * p.adsorption_saturation;
        if mass_per_bulk <= cap_mass {
            let c = mass_per_bulk / (a + b * k);
            (c, k * c)
        } else {
            ((mass_per_bulk - b * p.max_adsorption) / a, p.max_adsorption)
        }
    }

    fn mobilities(&self, sw: &[f64], conc: &[f64], ads: &[f64], out: &mut CellMobility) {
        let f = &self.deck.fluid;
        let p = &self.deck.polymer;
        let mu_w = f.mu_water_cp * CENTIPOISE;
        let mu_o = f.mu_oil_cp * CENTIPOISE;
        let span = 1.0 - f.swr - f.sor;
        for i in 0..sw.len() {
            let s = ((sw[i] - f.swr) / span).clamp(0.0, 1.0);
            let krw = f.krw_max * corey(s, f.n_water);
            let kro = f.kro_max * corey(1.0 - s, f.n_oil);
            let mixed = mu_w * (1.0 + p.viscosity_factor * conc[i]);
            let mu_eff = if conc[i] > 0.0 { mixed.powf(p.mixing_omega) * mu_w.powf(1.0 - p.mixing_omega) } else { mu_w };
            let rk = if p.max_adsorption > 0.0 { 1.0 + (p.rrf - 1.0) * ads[i] / p.max_adsorption } else { 1.0 };
            let lw = krw / (mu_eff * rk);
            let lo = kro / mu_o;
            out.water[i] = lw;
            out.oil[i] = lo;
            out.frac[i] = lw / (lw + lo);
            let m = mu_eff * rk / mu_o * f.kro_max / f.krw_max;
            out.slope[i] = self.slope.max_slope(m) / span;
        }
    }

    /// Solves for cell pressures given total mobilities and well sources
    /// (sm³/day, positive into the reservoir). With an aquifer the pressures
    /// are relative to the aquifer pressure, otherwise relative to a pinned
    /// cell. Returns the face fluxes and the boundary outflux per entry of
    /// `self.boundary`.
    fn pressure(&self, lam_t: &[f64], source: &[f64], pressure: &mut [f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = lam_t.len();
        let bw = self.bandwidth;
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        let mut face_t = Vec::with_capacity(self.faces.len());
        for f in &self.faces {
            let t = f.trans * 0.5 * (lam_t[f.a] + lam_t[f.b]);
            face_t.push(t);
            let (lo, hi) = if f.a < f.b { (f.a, f.b) } else { (f.b, f.a) };
            band[lo * w] += t;
            band[hi * w] += t;
            if Some(lo) != self.pin && Some(hi) != self.pin {
                band[hi * w + (hi - lo)] -= t;
            }
        }
        for (c, t) in &self.boundary {
            band[c * w] += t * lam_t[*c];
        }
        // The pinned cell is eliminated with pressure 0; the rest of the
        // system stays symmetric.
        let mut rhs = source.to_vec();
        if let Some(pin) = self.pin {
            band[pin * w] = 1.0;
            rhs[pin] = 0.0;
        }
        let chol = BandCholesky::factor(n, bw, band)?;
        chol.solve(&mut rhs);
        pressure.copy_from_slice(&rhs);
        let face_flux = self.faces.iter().zip(&face_t).map(|(f, t)| t * (pressure[f.a] - pressure[f.b])).collect();
        let boundary_flux = self.boundary.iter().map(|(c, t)| t * lam_t[*c] * pressure[*c]).collect();
        Ok((face_flux, boundary_flux))
    }

    /// Applied rates per well for one step, from the raw control targets.
    fn step_rates(&self, u: &ControlVector, step: usize) -> (Vec<f64>, Vec<f64>) {
        let n_wells = self.deck.wells.len();
        let mut target = vec![0.0; n_wells];
        let mut conc = vec![0.0; n_wells];
        for (t, (w, kind)) in self.control_types.iter().enumerate() {
            let v = u.get(t, step).max(0.0);
            match kind {
                ControlType::Concentration => conc[*w] = v,
                _ => target[*w] = v,
            }
        }
        let total = |k: WellKind| -> f64 {
            self.wells.iter().zip(&target).filter(|(w, _)| w.kind == k).map(|(_, r)| r).sum()
        };
        if !self.boundary.is_empty() {
            return (target, conc);
        }
        let (inj, prod) = (total(WellKind::Injector), total(WellKind::Producer));
        let q = inj.min(prod);
        let rates = self
            .wells
            .iter()
            .zip(&target)
            .map(|(w, r)| {
                if q <= 0.0 {
                    0.0
                } else {
                    match w.kind {
                        WellKind::Injector => r * q / inj,
                        WellKind::Producer => r * q / prod,
                    }
                }
            })
            .collect();
        (rates, conc)
    }

    pub fn simulate(&self, u: &ControlVector) -> Result<SimulationResult> {
        let deck = &self.deck;
        let sched = &deck.schedule;
        if u.n_wells() != self.control_types.len() || u.n_steps() != sched.n_steps {
            return Err(Error::Shape(format!(
                "deck '{}' expects {} control types × {} steps, got {} × {}",
                deck.name,
                self.control_types.len(),
                sched.n_steps,
                u.n_wells(),
                u.n_steps()
            )));
        }
        if u.values().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Precondition("controls must be finite and non-negative".into()));
        }
        let n = deck.grid.n_cells();
        let v = self.bulk_volume;
        let phi = &self.porosity;
        let pv: Vec<f64> = phi.iter().map(|p| p * v).collect();
        let ipv = deck.polymer.dead_pore_space;
        let cfl = sched.cfl;

        let mut sw = vec![deck.fluid.initial_sw; n];
        let mut mass = vec![0.0; n];
        let mut conc = vec![0.0; n];
        let mut ads = vec![0.0; n];
        let mut pressure = vec![0.0; n];
        let mut mob = CellMobility { water: vec![0.0; n], oil: vec![0.0; n], frac: vec![0.0; n], slope: vec![0.0; n] };
        let water_initial: f64 = sw.iter().zip(&pv).map(|(s, p)| s * p).sum();

        let n_wells = self.wells.len();
        let mut out = SimulationResult {
            times_days: Vec::with_capacity(sched.n_steps),
            step_days: vec![sched.step_days; sched.n_steps],
            q_op: Vec::new(),
            q_wp: Vec::new(),
            q_gp: Vec::new(),
            q_wi: Vec::new(),
            q_pi: Vec::new(),
            q_pp: Vec::new(),
            well_rates: Vec::new(),
            bhp_bar: Vec::new(),
            aquifer_water_in: 0.0,
            aquifer_water_out: 0.0,
            aquifer_oil_out: 0.0,
            aquifer_polymer_out: 0.0,
            water_residual: 0.0,
            polymer_residual: 0.0,
            min_saturation: deck.fluid.initial_sw,
            max_saturation: deck.fluid.initial_sw,
            min_concentration: 0.0,
            substeps: 0,
            breakthrough_days: vec![None; n_wells],
            final_saturation: Vec::new(),
            final_concentration: Vec::new(),
        };

        let mut source = vec![0.0; n];
        let mut out_flow = vec![0.0; n];
        let mut d_water = vec![0.0; n];
        let mut d_poly = vec![0.0; n];
        let mut lam_t = vec![0.0; n];
        let mut time = 0.0;
        let p_init = deck.fluid.initial_pressure_bar * BAR;
        let pv_total: f64 = pv.iter().sum();

        for step in 0..sched.n_steps {
            let (rates, inj_conc) = self.step_rates(u, step);
            let (mut qop, mut qwp, mut qwi, mut qpi, mut qpp) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let mut bhp = vec![0.0; n_wells];
            let flowing = rates.iter().any(|r| *r > 0.0);
            let dt_p = sched.step_days / sched.pressure_updates_per_step as f64;
            let mut substeps_here = 0usize;

            for _ in 0..sched.pressure_updates_per_step {
                if !flowing {
                    time += dt_p;
                    continue;
                }
                self.mobilities(&sw, &conc, &ads, &mut mob);
                for i in 0..n {
                    lam_t[i] = mob.water[i] + mob.oil[i];
                }
                source.iter_mut().for_each(|s| *s = 0.0);
                for (w, r) in self.wells.iter().zip(&rates) {
                    source[w.cell] += match w.kind {
                        WellKind::Injector => *r,
                        WellKind::Producer => -*r,
                    };
                }
                let (flux, boundary_flux) = self.pressure(&lam_t, &source, &mut pressure)?;
                let p_ref = if self.pin.is_some() {
                    p_init - pressure.iter().zip(&pv).map(|(p, v)| p * v).sum::<f64>() / pv_total
                } else {
                    self.aquifer_pressure
                };
                for (k, (w, r)) in self.wells.iter().zip(&rates).enumerate() {
                    let p_cell = pressure[w.cell] + p_ref;
                    let dp = r / (w.index * lam_t[w.cell]);
                    let p_bh = match w.kind {
                        WellKind::Injector => p_cell + dp,
                        WellKind::Producer => p_cell - dp,
                    };
                    bhp[k] += p_bh / BAR / sched.pressure_updates_per_step as f64;
                }

                out_flow.iter_mut().for_each(|o| *o = 0.0);
                for (f, q) in self.faces.iter().zip(&flux) {
                    if *q > 0.0 {
                        out_flow[f.a] += q;
                    } else {
                        out_flow[f.b] -= q;
                    }
                }
                for (w, r) in self.wells.iter().zip(&rates) {
                    if w.kind == WellKind::Producer {
                        out_flow[w.cell] += r;
                    }
                }
                for ((c, _), q) in self.boundary.iter().zip(&boundary_flux) {
                    out_flow[*c] += q.max(0.0);
                }

                let mut t = 0.0;
                let mut first = true;
                while t < dt_p * (1.0 - 1e-12) {
                    if !first {
                        self.mobilities(&sw, &conc, &ads, &mut mob);
                    }
                    first = false;
                    let mut dt = dt_p - t;
                    for i in 0..n {
                        let o = out_flow[i];
                        if o <= 0.0 {
                            continue;
                        }
                        dt = dt.min(cfl * pv[i] / (mob.slope[i] * o));
                        let water_out = mob.frac[i] * o;
                        if water_out > 0.0 && conc[i] > 0.0 {
                            dt = dt.min(cfl * pv[i] * sw[i] * (1.0 - ipv) / water_out);
                        }
                    }
                    if !(dt > 0.0) {
                        return Err(Error::Simulation(format!("transport step collapsed to {dt:e} days at t = {time:.3}")));
                    }
                    d_water.iter_mut().for_each(|d| *d = 0.0);
                    d_poly.iter_mut().for_each(|d| *d = 0.0);
                    for (f, q) in self.faces.iter().zip(&flux) {
                        let (up, down, q) = if *q > 0.0 { (f.a, f.b, *q) } else { (f.b, f.a, -*q) };
                        let w = mob.frac[up] * q;
                        d_water[up] -= w;
                        d_water[down] += w;
                        let pm = conc[up] * w;
                        d_poly[up] -= pm;
                        d_poly[down] += pm;
                    }
                    for ((c, _), q) in self.boundary.iter().zip(&boundary_flux) {
                        let c = *c;
                        if *q > 0.0 {
                            let qw = mob.frac[c] * q;
                            d_water[c] -= qw;
                            d_poly[c] -= conc[c] * qw;
                            out.aquifer_water_out += qw * dt;
                            out.aquifer_oil_out += (q - qw) * dt;
                            out.aquifer_polymer_out += conc[c] * qw * dt;
                        } else {
                            d_water[c] -= q;
                            out.aquifer_water_in -= q * dt;
                        }
                    }
                    for (k, (w, r)) in self.wells.iter().zip(&rates).enumerate() {
                        let c = w.cell;
                        match w.kind {
                            WellKind::Injector => {
                                d_water[c] += r;
                                d_poly[c] += inj_conc[k] * r;
                                qwi += r * dt;
                                qpi += inj_conc[k] * r * dt;
                            }
                            WellKind::Producer => {
                                let qw = mob.frac[c] * r;
                                d_water[c] -= qw;
                                d_poly[c] -= conc[c] * qw;
                                qwp += qw * dt;
                                qop += (r - qw) * dt;
                                qpp += conc[c] * qw * dt;
                                if out.breakthrough_days[k].is_none() && *r > 0.0 && mob.frac[c] >= sched.breakthrough_water_cut {
                                    out.breakthrough_days[k] = Some(time + t + dt);
                                }
                            }
                        }
                    }
                    for i in 0..n {
                        sw[i] += dt * d_water[i] / pv[i];
                        mass[i] += dt * d_poly[i];
                        let (c, a) = self.partition(mass[i] / v, phi[i], sw[i]);
                        conc[i] = c;
                        ads[i] = a;
                        out.min_saturation = out.min_saturation.min(sw[i]);
                        out.max_saturation = out.max_saturation.max(sw[i]);
                        out.min_concentration = out.min_concentration.min(c);
                    }
                    if out.min_saturation < -SATURATION_SLACK || out.max_saturation > 1.0 + SATURATION_SLACK {
                        return Err(Error::Consistency(format!(
                            "water saturation left [0, 1]: min {:e}, max {}",
                            out.min_saturation, out.max_saturation
                        )));
                    }
                    t += dt;
                    substeps_here += 1;
                    if substeps_here > sched.max_substeps {
                        return Err(Error::Simulation(format!(
                            "control step {step} needs more than {} transport substeps (last dt {dt:e} days)",
                            sched.max_substeps
                        )));
                    }
                }
                time += dt_p;
            }
            out.substeps += substeps_here;
            out.times_days.push(sched.step_days * (step + 1) as f64);
            out.q_op.push(qop);
            out.q_wp.push(qwp);
            out.q_gp.push(0.0);
            out.q_wi.push(qwi);
            out.q_pi.push(qpi);
            out.q_pp.push(qpp);
            out.well_rates.push(rates);
            out.bhp_bar.push(if flowing { bhp } else { vec![deck.fluid.initial_pressure_bar; n_wells] });
        }

        let water_final: f64 = sw.iter().zip(&pv).map(|(s, p)| s * p).sum();
        let wi: f64 = out.q_wi.iter().sum();
        let wp: f64 = out.q_wp.iter().sum();
        let (aq_in, aq_out) = (out.aquifer_water_in, out.aquifer_water_out);
        let scale = wi.max(wp).max(aq_in).max(aq_out).max(1.0);
        out.water_residual = (wi + aq_in - wp - aq_out - (water_final - water_initial)).abs() / scale;
        let pi: f64 = out.q_pi.iter().sum();
        let pp: f64 = out.q_pp.iter().sum();
        let polymer_final: f64 = mass.iter().sum();
        out.polymer_residual = (pi - pp - out.aquifer_polymer_out - polymer_final).abs() / pi.max(1.0);
        out.final_saturation = sw;
        out.final_concentration = conc;
        Ok(out)
    }
}

/// Convenience wrapper: prepares the deck and runs one simulation.
pub fn simulate(deck: &Deck, u: &ControlVector) -> Result<SimulationResult> {
    Simulator::new(deck.clone())?.simulate(u)
}
