//! The two adversarial objectives, in minimized negative-log-likelihood
//! form. Components are returned unweighted so that logs can show how the
//! total is put together.

use super::TrainConfig;
use crate::tensor::{Graph, Result, Var};

#[derive(Clone, Copy, Debug)]
pub struct CriticLoss {
    /// `λ_d·adv + λ_cd·aux`
    pub total: Var,
    /// `−log D(x) − log(1 − D(G(z)))`
    pub adv: Var,
    /// `−log p(c | x) − log p(c | G(z))`
    pub aux: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    /// `λ_g·adv + λ_cg·aux + λ_l·l1`
    pub total: Var,
    /// `−log D(G(z))` (non-saturating)
    pub adv: Var,
    /// `−log p(c | G(z))`
    pub aux: Var,
    /// `mean |x − G(z)|`
    pub l1: Var,
}

/// `live` holds the liveness target of each sample (1 live, 0 spoof); the
/// auxiliary head outputs p(live | ·), so BCE against it is the negative
/// log-probability of the true class.
pub fn critic_loss(
    g: &mut Graph,
    adv_real: Var,
    adv_fake: Var,
    class_real: Var,
    class_fake: Var,
    live: &[f64],
    cfg: &TrainConfig,
) -> Result<CriticLoss> {
    let n = live.len();
    let real = g.bce(adv_real, &vec![1.0; n])?;
    let fake = g.bce(adv_fake, &vec![0.0; n])?;
    let adv = g.add(real, fake)?;
    let cr = g.bce(class_real, live)?;
    let cf = g.bce(class_fake, live)?;
    let aux = g.add(cr, cf)?;
    let wa = g.scale(adv, cfg.lambda_d)?;
    let wc = g.scale(aux, cfg.lambda_cd)?;
    let total = g.add(wa, wc)?;
    Ok(CriticLoss { total, adv, aux })
}

pub fn generator_loss(
    g: &mut Graph,
    adv_fake: Var,
    class_fake: Var,
    live: &[f64],
    gen_depth: Var,
    gt_depth: Var,
    cfg: &TrainConfig,
) -> Result<GeneratorLoss> {
    let n = live.len();
    let adv = g.bce(adv_fake, &vec![1.0; n])?;
    let aux = g.bce(class_fake, live)?;
    let l1 = g.l1_loss(gen_depth, gt_depth)?;
    let wa = g.scale(adv, cfg.lambda_g)?;
    let wc = g.scale(aux, cfg.lambda_cg)?;
    let wl = g.scale(l1, cfg.lambda_l)?;
    let partial = g.add(wa, wc)?;
    let total = g.add(partial, wl)?;
    Ok(GeneratorLoss { total, adv, aux, l1 })
}
