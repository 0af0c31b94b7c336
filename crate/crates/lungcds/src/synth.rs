//! Synthetic case generator with known gold labels.
//!
//! Each case samples a (T, N, M) triple and synthesizes findings consistent
//! with the staging rule file: a diameter inside the sampled T interval (or a
//! descriptor whose minimum is exactly the sampled T), stations mapping to
//! the sampled N, and distant patterns for the sampled M. Report text is
//! rendered from bilingual templates that the deterministic normalizer parses
//! back exactly, so the rule pipeline recovers the sampled triple on every
//! uncertainty-free case. Injected hedged findings are chosen to raise the
//! overall stage when confirmed, exercising the projection path end to end.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{aggregate_stage, StageGroupTable};
use crate::case::{CaseDocument, CaseRecord, GoldStaging, GoldTreatment, Language, Modality};
use crate::normalize::Side;
use crate::pipeline::{decide_case, EngineChoice, PipelineContext, StageSource};
use crate::staging::{MCategory, NCategory, StagingRuleFile, TCategory};

#[derive(Debug, Clone)]
pub struct GenParams {
    pub seed: u64,
    pub language: Language,
    /// Probability that a case carries one hedged finding that would raise
    /// its overall stage if confirmed.
    pub uncertainty_rate: f64,
    /// Probability of dropping each non-imaging modality. The imaging report
    /// carries the staging evidence and is never dropped.
    pub modality_dropout_rate: f64,
    pub t_weights: Vec<(TCategory, f64)>,
    pub n_weights: Vec<(NCategory, f64)>,
    pub m_weights: Vec<(MCategory, f64)>,
    /// Add irrelevant benign findings to stress normalization.
    pub distractors: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 0,
            language: Language::Zh,
            uncertainty_rate: 0.0,
            modality_dropout_rate: 0.0,
            t_weights: [
                TCategory::T1a,
                TCategory::T1b,
                TCategory::T1c,
                TCategory::T2a,
                TCategory::T2b,
                TCategory::T3,
                TCategory::T4,
            ]
            .iter()
            .map(|&c| (c, 1.0))
            .collect(),
            n_weights: [NCategory::N0, NCategory::N1, NCategory::N2, NCategory::N3]
                .iter()
                .map(|&c| (c, 1.0))
                .collect(),
            m_weights: [MCategory::M0, MCategory::M1a, MCategory::M1b, MCategory::M1c]
                .iter()
                .map(|&c| (c, 1.0))
                .collect(),
            distractors: false,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.uncertainty_rate) {
            return Err(format!("uncertainty_rate {} out of [0,1]", self.uncertainty_rate));
        }
        if !(0.0..=1.0).contains(&self.modality_dropout_rate) {
            return Err(format!(
                "modality_dropout_rate {} out of [0,1]",
                self.modality_dropout_rate
            ));
        }
        for (name, total) in [
            ("t_weights", self.t_weights.iter().map(|(_, w)| w).sum::<f64>()),
            ("n_weights", self.n_weights.iter().map(|(_, w)| w).sum::<f64>()),
            ("m_weights", self.m_weights.iter().map(|(_, w)| w).sum::<f64>()),
        ] {
            if total <= 0.0 || !total.is_finite() {
                return Err(format!("{name} do not normalize"));
            }
        }
        if self.t_weights.iter().any(|(c, w)| *c == TCategory::Tx && *w > 0.0) {
            return Err("Tx is not synthesizable (no size interval)".into());
        }
        if self.n_weights.iter().any(|(c, w)| *c == NCategory::Nx && *w > 0.0) {
            return Err("Nx is not synthesizable".into());
        }
        Ok(())
    }
}

fn weighted<T: Copy>(rng: &mut ChaCha8Rng, weights: &[(T, f64)]) -> T {
    let total: f64 = weights.iter().map(|(_, w)| w.max(0.0)).sum();
    let mut draw = rng.gen_range(0.0..total);
    for (value, w) in weights {
        let w = w.max(0.0);
        if draw < w {
            return *value;
        }
        draw -= w;
    }
    weights.last().expect("non-empty weights").0
}

struct Texts {
    zh: &'static str,
    en: &'static str,
}

fn lobe_name(side: Side, lobe: usize, lang: Language) -> String {
    let (zh_side, en_side) = match side {
        Side::Left => ("左", "left"),
        _ => ("右", "right"),
    };
    let (zh_lobe, en_lobe) = match (side, lobe) {
        (Side::Right, 1) => ("中", "middle"),
        (_, 0) => ("上", "upper"),
        _ => ("下", "lower"),
    };
    match lang {
        Language::Zh => format!("{zh_side}肺{zh_lobe}叶"),
        Language::En => format!("{en_side} {en_lobe} lobe"),
    }
}

fn other_lobe(side: Side, primary_lobe: usize, rng: &mut ChaCha8Rng) -> usize {
    let options: Vec<usize> = match side {
        Side::Right => (0..3).filter(|l| *l != primary_lobe).collect(),
        _ => (0..2).filter(|l| *l != primary_lobe).collect(),
    };
    options[rng.gen_range(0..options.len())]
}

/// Internal plan for one case, assembled before rendering.
struct CasePlan {
    t: TCategory,
    n: NCategory,
    m: MCategory,
    side: Side,
    lobe: usize,
    imaging_lines: Vec<String>,
    evidence_notes: Vec<String>,
}

const T_DESCRIPTORS: &[(TCategory, Texts)] = &[
    (TCategory::T2a, Texts { zh: "伴胸膜侵犯", en: "with visceral pleural invasion" }),
    (TCategory::T2a, Texts { zh: "伴累及主支气管", en: "involving the main bronchus" }),
    (TCategory::T2a, Texts { zh: "伴阻塞性肺炎", en: "with obstructive pneumonitis" }),
    (TCategory::T3, Texts { zh: "伴侵犯胸壁", en: "invading the chest wall" }),
    (TCategory::T4, Texts { zh: "伴侵犯纵隔", en: "invading the mediastinum" }),
    (TCategory::T4, Texts { zh: "伴侵犯膈肌", en: "invading the diaphragm" }),
];

fn size_in(rng: &mut ChaCha8Rng, rules: &StagingRuleFile, t: TCategory) -> u32 {
    let iv = rules
        .size_intervals()
        .iter()
        .find(|iv| iv.category == t)
        .expect("synthesizable T has a size interval");
    let lo = iv.above_mm as u32 + 1;
    let hi = iv.up_to_mm.map(|h| h as u32).unwrap_or(iv.above_mm as u32 + 50);
    rng.gen_range(lo..=hi)
}

fn confirmed_suffix(lang: Language) -> &'static str {
    match lang {
        Language::Zh => "，考虑转移。",
        Language::En => ", consistent with metastasis.",
    }
}

fn station_line(side: Side, station: &str, lang: Language) -> String {
    // `station` is one of: hilar, peribronchial, mediastinal (ipsi side),
    // contra-mediastinal, contra-hilar, subcarinal, supraclavicular.
    let contra = side.opposite();
    let (zh, en) = match station {
        "hilar" => (
            format!("{}肺门淋巴结肿大", zh_side(side)),
            format!("Enlarged {} hilar lymph nodes", en_side(side)),
        ),
        "peribronchial" => (
            format!("{}支气管旁淋巴结肿大", zh_side(side)),
            format!("Enlarged {} peribronchial nodes", en_side(side)),
        ),
        "mediastinal" => (
            format!("{}纵隔淋巴结肿大", zh_side(side)),
            format!("Enlarged {} mediastinal lymph nodes", en_side(side)),
        ),
        "subcarinal" => (
            "隆突下淋巴结肿大".to_string(),
            "Enlarged subcarinal lymph nodes".to_string(),
        ),
        "contra-mediastinal" => (
            format!("{}纵隔淋巴结肿大", zh_side(contra)),
            format!("Enlarged {} mediastinal lymph nodes", en_side(contra)),
        ),
        "contra-hilar" => (
            format!("{}肺门淋巴结肿大", zh_side(contra)),
            format!("Enlarged {} hilar lymph nodes", en_side(contra)),
        ),
        "supraclavicular" => (
            format!("{}锁骨上淋巴结肿大", zh_side(side)),
            format!("Enlarged {} supraclavicular lymph nodes", en_side(side)),
        ),
        _ => unreachable!("unknown station template {station}"),
    };
    match lang {
        Language::Zh => format!("{zh}{}", confirmed_suffix(lang)),
        Language::En => format!("{en}{}", confirmed_suffix(lang)),
    }
}

fn zh_side(side: Side) -> &'static str {
    if side == Side::Left {
        "左"
    } else {
        "右"
    }
}

fn en_side(side: Side) -> &'static str {
    if side == Side::Left {
        "left"
    } else {
        "right"
    }
}

const ORGANS: &[(Texts, &str)] = &[
    (Texts { zh: "肝脏", en: "liver" }, "liver"),
    (Texts { zh: "左肾上腺", en: "left adrenal" }, "adrenal"),
    (Texts { zh: "脑", en: "brain" }, "brain"),
    (Texts { zh: "脾脏", en: "spleen" }, "spleen"),
];

fn organ_line(organ: &Texts, lang: Language) -> String {
    match lang {
        Language::Zh => format!("{}见单发病灶{}", organ.zh, confirmed_suffix(lang)),
        Language::En => format!(
            "Single lesion in the {}{}",
            organ.en,
            confirmed_suffix(lang)
        ),
    }
}

fn plan_case(params: &GenParams, rng: &mut ChaCha8Rng, rules: &StagingRuleFile) -> CasePlan {
    let t = weighted(rng, &params.t_weights);
    let n = weighted(rng, &params.n_weights);
    let m = weighted(rng, &params.m_weights);
    let side = if rng.gen_bool(0.5) { Side::Right } else { Side::Left };
    let lobe = match side {
        Side::Right => rng.gen_range(0..3usize),
        _ => rng.gen_range(0..2usize),
    };
    let lang = params.language;
    let mut imaging_lines = Vec::new();
    let mut evidence_notes = Vec::new();

    // Primary tumor evidence: size inside the sampled interval, or a
    // descriptor whose minimum is exactly the sampled category plus a
    // smaller size.
    let descriptor_candidates: Vec<&Texts> = T_DESCRIPTORS
        .iter()
        .filter(|(min_t, _)| *min_t == t)
        .map(|(_, texts)| texts)
        .collect();
    let descriptor_route = !descriptor_candidates.is_empty() && rng.gen_bool(0.25);
    let same_lobe_nodule_route = t == TCategory::T3 && !descriptor_route && rng.gen_bool(0.25);
    let other_lobe_nodule_route = t == TCategory::T4 && !descriptor_route && rng.gen_bool(0.25);

    let size_mm = if descriptor_route || same_lobe_nodule_route || other_lobe_nodule_route {
        let lower = weighted(
            rng,
            &[
                (TCategory::T1a, 1.0),
                (TCategory::T1b, 1.0),
                (TCategory::T1c, 1.0),
            ],
        );
        size_in(rng, rules, lower)
    } else {
        size_in(rng, rules, t)
    };

    let mut primary = match lang {
        Language::Zh => format!("{}见肿物，最大径{}mm", lobe_name(side, lobe, lang), size_mm),
        Language::En => format!(
            "Mass in the {}, maximum diameter {} mm",
            lobe_name(side, lobe, lang),
            size_mm
        ),
    };
    if descriptor_route {
        let texts = descriptor_candidates[rng.gen_range(0..descriptor_candidates.len())];
        match lang {
            Language::Zh => primary.push_str(texts.zh),
            Language::En => {
                primary.push_str(", ");
                primary.push_str(texts.en);
            }
        }
        evidence_notes.push(match lang {
            Language::Zh => format!("T: 侵犯征象提示至少{t}"),
            Language::En => format!("T: invasion findings imply at least {t}"),
        });
    } else if !same_lobe_nodule_route && !other_lobe_nodule_route {
        // Purely size-driven: optionally add a descriptor that cannot raise
        // the category.
        let weaker: Vec<&Texts> = T_DESCRIPTORS
            .iter()
            .filter(|(min_t, _)| *min_t < t)
            .map(|(_, texts)| texts)
            .collect();
        if !weaker.is_empty() && rng.gen_bool(0.25) {
            let texts = weaker[rng.gen_range(0..weaker.len())];
            match lang {
                Language::Zh => primary.push_str(texts.zh),
                Language::En => {
                    primary.push_str(", ");
                    primary.push_str(texts.en);
                }
            }
        }
    }
    match lang {
        Language::Zh => primary.push('。'),
        Language::En => primary.push('.'),
    }
    imaging_lines.push(primary);
    evidence_notes.push(match lang {
        Language::Zh => format!("T: 原发灶最大径{size_mm}mm"),
        Language::En => format!("T: primary diameter {size_mm} mm"),
    });

    if same_lobe_nodule_route {
        imaging_lines.push(match lang {
            Language::Zh => format!(
                "{}另见结节{}",
                lobe_name(side, lobe, lang),
                confirmed_suffix(lang)
            ),
            Language::En => format!(
                "Separate nodule in the {}{}",
                lobe_name(side, lobe, lang),
                confirmed_suffix(lang)
            ),
        });
        evidence_notes.push(match lang {
            Language::Zh => "T: 同叶卫星结节提示T3".into(),
            Language::En => "T: same-lobe satellite nodule implies T3".into(),
        });
    }
    if other_lobe_nodule_route {
        let nodule_lobe = other_lobe(side, lobe, rng);
        imaging_lines.push(match lang {
            Language::Zh => format!(
                "{}见结节{}",
                lobe_name(side, nodule_lobe, lang),
                confirmed_suffix(lang)
            ),
            Language::En => format!(
                "Nodule in the {}{}",
                lobe_name(side, nodule_lobe, lang),
                confirmed_suffix(lang)
            ),
        });
        evidence_notes.push(match lang {
            Language::Zh => "T: 同侧不同肺叶结节提示T4".into(),
            Language::En => "T: separate ipsilateral-lobe nodule implies T4".into(),
        });
    }

    // Nodal evidence: stations whose maximum is exactly the sampled N.
    let mut stations: Vec<&str> = Vec::new();
    match n {
        NCategory::N0 | NCategory::Nx => {}
        NCategory::N1 => {
            stations.push(if rng.gen_bool(0.7) { "hilar" } else { "peribronchial" });
        }
        NCategory::N2 => {
            stations.push(if rng.gen_bool(0.5) { "mediastinal" } else { "subcarinal" });
            if rng.gen_bool(0.5) {
                stations.push("hilar");
            }
        }
        NCategory::N3 => {
            let top = ["contra-mediastinal", "contra-hilar", "supraclavicular"];
            stations.push(top[rng.gen_range(0..top.len())]);
            if rng.gen_bool(0.4) {
                stations.push("mediastinal");
            }
            if rng.gen_bool(0.3) {
                stations.push("hilar");
            }
        }
    }
    for station in &stations {
        imaging_lines.push(station_line(side, station, lang));
    }
    if !stations.is_empty() {
        evidence_notes.push(match lang {
            Language::Zh => format!("N: 受累站点 {}", stations.join("/")),
            Language::En => format!("N: involved stations {}", stations.join("/")),
        });
    } else {
        evidence_notes.push(match lang {
            Language::Zh => "N: 未见区域淋巴结转移".into(),
            Language::En => "N: no regional node involvement".into(),
        });
    }

    // Distant evidence for the sampled M tier.
    match m {
        MCategory::M0 => {
            evidence_notes.push(match lang {
                Language::Zh => "M: 无远处转移".into(),
                Language::En => "M: no distant metastasis".into(),
            });
        }
        MCategory::M1a => {
            let choice = rng.gen_range(0..3);
            let line = match (choice, lang) {
                (0, Language::Zh) => "恶性胸腔积液。".to_string(),
                (0, Language::En) => "Malignant pleural effusion.".to_string(),
                (1, Language::Zh) => "恶性心包积液。".to_string(),
                (1, Language::En) => "Malignant pericardial effusion.".to_string(),
                (_, lang) => {
                    // Contralateral lung nodule.
                    let contra = side.opposite();
                    let nodule_lobe = match contra {
                        Side::Right => rng.gen_range(0..3usize),
                        _ => rng.gen_range(0..2usize),
                    };
                    match lang {
                        Language::Zh => format!(
                            "{}见结节{}",
                            lobe_name(contra, nodule_lobe, lang),
                            confirmed_suffix(lang)
                        ),
                        Language::En => format!(
                            "Nodule in the {}{}",
                            lobe_name(contra, nodule_lobe, lang),
                            confirmed_suffix(lang)
                        ),
                    }
                }
            };
            imaging_lines.push(line);
            evidence_notes.push(match lang {
                Language::Zh => "M: 胸内播散征象，M1a".into(),
                Language::En => "M: intrathoracic dissemination, M1a".into(),
            });
        }
        MCategory::M1b => {
            let organ = &ORGANS[rng.gen_range(0..ORGANS.len())].0;
            imaging_lines.push(organ_line(organ, lang));
            evidence_notes.push(match lang {
                Language::Zh => "M: 单发胸外转移，M1b".into(),
                Language::En => "M: single extrathoracic lesion, M1b".into(),
            });
        }
        MCategory::M1c => {
            if rng.gen_bool(0.4) {
                imaging_lines.push(match lang {
                    Language::Zh => "多发骨转移灶，考虑转移。".to_string(),
                    Language::En => "Multiple bone lesions, consistent with metastases.".to_string(),
                });
            } else {
                let mut picks = rand::seq::index::sample(rng, ORGANS.len(), 2).into_vec();
                picks.sort();
                for i in picks {
                    imaging_lines.push(organ_line(&ORGANS[i].0, lang));
                }
            }
            evidence_notes.push(match lang {
                Language::Zh => "M: 多发胸外转移，M1c".into(),
                Language::En => "M: multiple extrathoracic lesions, M1c".into(),
            });
        }
    }

    CasePlan {
        t,
        n,
        m,
        side,
        lobe,
        imaging_lines,
        evidence_notes,
    }
}

/// The hedged-finding templates that can raise a dimension. Returns the
/// imaging line to inject.
fn uncertainty_line(
    plan: &CasePlan,
    rng: &mut ChaCha8Rng,
    lang: Language,
    rules: &StagingRuleFile,
    table: &StageGroupTable,
) -> Option<String> {
    let base_stage = aggregate_stage(plan.t, plan.n, plan.m, table);
    base_stage.rank()?;

    let mut candidates: Vec<(String, crate::aggregate::OverallStage)> = Vec::new();

    // N raise: contralateral mediastinal node -> N3.
    if let Some(n3) = rules.station_category("contralateral-mediastinal") {
        let new_n = plan.n.max(n3);
        let projected = aggregate_stage(plan.t, new_n, plan.m, table);
        if projected.is_above(base_stage) {
            let contra = plan.side.opposite();
            candidates.push((
                match lang {
                    Language::Zh => format!("{}纵隔淋巴结肿大，性质待定。", zh_side(contra)),
                    Language::En => format!(
                        "Enlarged {} mediastinal lymph nodes, nature to be determined.",
                        en_side(contra)
                    ),
                },
                projected,
            ));
        }
    }

    // M raise: a suspicious extrathoracic lesion, single or multifocal. The
    // confirmed extrathoracic lesion count by tier is 0/0/1/2+, so a single
    // suspicious lesion reaches at least M1b and a multifocal pattern M1c.
    let base_extra = match plan.m {
        MCategory::M0 | MCategory::M1a => 0,
        MCategory::M1b => 1,
        MCategory::M1c => 2,
    };
    for multifocal in [false, true] {
        let count = base_extra + if multifocal { 2 } else { 1 };
        let tier = if count == 1 { MCategory::M1b } else { MCategory::M1c };
        let new_m = plan.m.max(tier);
        let projected = aggregate_stage(plan.t, plan.n, new_m, table);
        if !projected.is_above(base_stage) {
            continue;
        }
        let line = if multifocal {
            match lang {
                Language::Zh => "可疑多发骨转移灶，性质待定。".to_string(),
                Language::En => {
                    "Multiple suspicious bone lesions, nature to be determined.".to_string()
                }
            }
        } else {
            let organ = &ORGANS[rng.gen_range(0..ORGANS.len())].0;
            match lang {
                Language::Zh => format!("{}见可疑病灶，不除外转移。", organ.zh),
                Language::En => format!(
                    "Suspicious lesion in the {}, metastasis cannot be excluded.",
                    organ.en
                ),
            }
        };
        candidates.push((line, projected));
    }

    // T raise: suspicious nodule in another ipsilateral lobe -> T4.
    if plan.t < TCategory::T4 {
        let projected = aggregate_stage(TCategory::T4, plan.n, plan.m, table);
        if projected.is_above(base_stage) {
            let nodule_lobe = other_lobe(plan.side, plan.lobe, rng);
            candidates.push((
                match lang {
                    Language::Zh => format!(
                        "{}可疑结节，性质待定。",
                        lobe_name(plan.side, nodule_lobe, lang)
                    ),
                    Language::En => format!(
                        "Suspicious nodule in the {}, nature to be determined.",
                        lobe_name(plan.side, nodule_lobe, lang)
                    ),
                },
                projected,
            ));
        }
    }

    if candidates.is_empty() {
        return None;
    }
    let (line, _) = candidates.swap_remove(rng.gen_range(0..candidates.len()));
    Some(line)
}

struct ClinicalPlan {
    ps: Option<u8>,
    age: u32,
    line: u32,
    postop: bool,
    resect_intent: bool,
    histology_idx: usize,
    driver_idx: usize,
    pdl1: Option<u32>,
}

const HISTOLOGIES: &[Texts] = &[
    Texts { zh: "腺癌", en: "Adenocarcinoma" },
    Texts { zh: "鳞状细胞癌", en: "Squamous cell carcinoma" },
    Texts { zh: "大细胞癌", en: "Large cell carcinoma" },
    Texts { zh: "小细胞肺癌", en: "Small cell lung cancer" },
];

const DRIVERS: &[Texts] = &[
    Texts { zh: "EGFR 19del 突变阳性", en: "EGFR exon 19 deletion mutation detected" },
    Texts { zh: "ALK 融合阳性", en: "ALK fusion detected" },
    Texts { zh: "ROS1 重排阳性", en: "ROS1 rearrangement detected" },
    Texts { zh: "KRAS G12C 突变阳性", en: "KRAS G12C mutation detected" },
    Texts { zh: "驱动基因均阴性", en: "All driver genes negative" },
];

fn plan_clinical(
    rng: &mut ChaCha8Rng,
    plan: &CasePlan,
    table: &StageGroupTable,
) -> ClinicalPlan {
    let stage = aggregate_stage(plan.t, plan.n, plan.m, table);
    let metastatic = matches!(
        stage,
        crate::aggregate::OverallStage::IVA | crate::aggregate::OverallStage::IVB
    );
    let ps = if rng.gen_bool(0.9) {
        Some(weighted(rng, &[(0u8, 3.0), (1, 4.0), (2, 2.0), (3, 0.7), (4, 0.3)]))
    } else {
        None
    };
    let postop = !metastatic
        && stage != crate::aggregate::OverallStage::Indeterminate
        && rng.gen_bool(0.35);
    let resect_intent = !postop
        && matches!(
            stage,
            crate::aggregate::OverallStage::IIA
                | crate::aggregate::OverallStage::IIB
                | crate::aggregate::OverallStage::IIIA
                | crate::aggregate::OverallStage::IIIB
        )
        && rng.gen_bool(0.5);
    let line = if metastatic {
        weighted(rng, &[(1u32, 6.0), (2, 2.5), (3, 1.5)])
    } else {
        1
    };
    ClinicalPlan {
        ps,
        age: rng.gen_range(35..85),
        line,
        postop,
        resect_intent,
        histology_idx: weighted(rng, &[(0usize, 5.5), (1, 3.0), (2, 1.0), (3, 0.5)]),
        driver_idx: weighted(rng, &[(0usize, 2.0), (1, 0.5), (2, 0.3), (3, 0.5), (4, 5.2)]),
        pdl1: if rng.gen_bool(0.85) {
            Some(weighted(rng, &[(0u32, 3.0), (5, 2.0), (30, 3.0), (60, 2.5), (90, 1.0)]))
        } else {
            None
        },
    }
}

fn render_clinical(id: &str, c: &ClinicalPlan, plan: &CasePlan, lang: Language) -> String {
    let mut s = String::new();
    match lang {
        Language::Zh => {
            s.push_str(&format!("临床记录。病例号: {id}。患者{}岁。", c.age));
            if let Some(ps) = c.ps {
                s.push_str(&format!("ECOG PS {ps}分。"));
            }
            match c.line {
                1 => s.push_str("未接受系统治疗。"),
                2 => s.push_str("既往接受含铂双药化疗。"),
                _ => s.push_str("既往接受含铂双药化疗。既往接受免疫治疗。"),
            }
            if c.postop {
                s.push_str(&format!(
                    "已行{}切除术。",
                    lobe_name(plan.side, plan.lobe, lang)
                ));
            } else {
                s.push_str("未行手术治疗。");
            }
            if c.resect_intent {
                s.push_str("拟行根治性手术。");
            }
        }
        Language::En => {
            s.push_str(&format!("Clinical record. Case: {id}. The patient is {} years old. ", c.age));
            if let Some(ps) = c.ps {
                s.push_str(&format!("ECOG PS {ps}. "));
            }
            match c.line {
                1 => s.push_str("No prior systemic therapy. "),
                2 => s.push_str("Previously received chemotherapy (platinum doublet). "),
                _ => s.push_str(
                    "Previously received chemotherapy (platinum doublet). Previously received immunotherapy. ",
                ),
            }
            if c.postop {
                s.push_str(&format!(
                    "Underwent resection of the {}. ",
                    lobe_name(plan.side, plan.lobe, lang)
                ));
            } else {
                s.push_str("No surgery performed. ");
            }
            if c.resect_intent {
                s.push_str("Planned for surgical resection. ");
            }
        }
    }
    s.trim_end().to_string()
}

fn render_pathology(id: &str, c: &ClinicalPlan, plan: &CasePlan, lang: Language) -> String {
    let h = &HISTOLOGIES[c.histology_idx];
    match lang {
        Language::Zh => format!(
            "病理报告。病例号: {id}。（{}穿刺活检）{}。",
            lobe_name(plan.side, plan.lobe, lang),
            h.zh
        ),
        Language::En => format!(
            "Pathology report. Case: {id}. ({} biopsy) {}.",
            lobe_name(plan.side, plan.lobe, lang),
            h.en
        ),
    }
}

fn render_supplementary(id: &str, c: &ClinicalPlan, lang: Language) -> String {
    let d = &DRIVERS[c.driver_idx];
    let mut s = match lang {
        Language::Zh => format!("补充资料。病例号: {id}。基因检测: {}。", d.zh),
        Language::En => format!("Supplementary data. Case: {id}. Genomic testing: {}. ", d.en),
    };
    if let Some(pdl1) = c.pdl1 {
        match lang {
            Language::Zh => s.push_str(&format!("PD-L1 TPS {pdl1}%。")),
            Language::En => s.push_str(&format!("PD-L1 TPS {pdl1}%.")),
        }
    }
    s.trim_end().to_string()
}

fn render_imaging(id: &str, lines: &[String], lang: Language) -> String {
    let header = match lang {
        Language::Zh => format!("影像学检查报告。病例号: {id}。"),
        Language::En => format!("Imaging report. Case: {id}. "),
    };
    let mut s = header;
    for line in lines {
        s.push_str(line);
        if lang == Language::En && !s.ends_with(' ') {
            s.push(' ');
        }
    }
    s.trim_end().to_string()
}

/// Generate one case. A pure function of `(params, index)`.
pub fn generate_case(params: &GenParams, index: u64) -> CaseRecord {
    let rules = StagingRuleFile::embedded();
    let table = StageGroupTable::embedded();
    let lang = params.language;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index.wrapping_add(1));

    let mut plan = plan_case(params, &mut rng, rules);
    let clinical = plan_clinical(&mut rng, &plan, table);
    let id = format!("syn-{index:06}");

    // Hedged finding that would raise the stage if confirmed.
    if rng.gen_bool(params.uncertainty_rate.clamp(0.0, 1.0)) {
        if let Some(line) = uncertainty_line(&plan, &mut rng, lang, rules, table) {
            plan.imaging_lines.push(line);
        }
    }

    if params.distractors {
        let extras: &[Texts] = &[
            Texts { zh: "肝脏小囊肿。", en: "Small hepatic cyst." },
            Texts { zh: "主动脉壁钙化。", en: "Aortic wall calcification." },
            Texts { zh: "双肺未见其他异常。", en: "No evidence of other abnormality in either lung." },
        ];
        for t in extras {
            if rng.gen_bool(0.5) {
                plan.imaging_lines.push(
                    match lang {
                        Language::Zh => t.zh,
                        Language::En => t.en,
                    }
                    .to_string(),
                );
            }
        }
    }

    // Assemble documents; non-imaging modalities are subject to dropout.
    let mut documents = vec![CaseDocument::text_only(
        Modality::Imaging,
        render_imaging(&id, &plan.imaging_lines, lang),
    )];
    let mut keep = |_: Modality| !rng.gen_bool(params.modality_dropout_rate.clamp(0.0, 1.0));
    if keep(Modality::Clinical) {
        documents.insert(0, CaseDocument::text_only(
            Modality::Clinical,
            render_clinical(&id, &clinical, &plan, lang),
        ));
    }
    if keep(Modality::Pathology) {
        documents.push(CaseDocument::text_only(
            Modality::Pathology,
            render_pathology(&id, &clinical, &plan, lang),
        ));
    }
    if keep(Modality::Supplementary) {
        documents.push(CaseDocument::text_only(
            Modality::Supplementary,
            render_supplementary(&id, &clinical, lang),
        ));
    }

    let overall = aggregate_stage(plan.t, plan.n, plan.m, table);
    let reasoning_evidence = plan.evidence_notes.join(match lang {
        Language::Zh => "；",
        Language::En => "; ",
    });

    let mut case = CaseRecord {
        id,
        language: lang,
        documents,
        gold_staging: Some(GoldStaging {
            t: plan.t,
            n: plan.n,
            m: plan.m,
            reasoning_evidence,
            extra: serde_json::Map::new(),
        }),
        gold_treatment: None,
        extra: serde_json::Map::new(),
    };
    case.extra.insert(
        "gold_overall_stage".into(),
        serde_json::Value::String(overall.to_string()),
    );

    // Gold treatment: the deterministic decision pipeline over the surviving
    // documents, conditioned on the gold stage.
    let ctx = PipelineContext::embedded();
    if let Ok(decision) = decide_case(
        &case,
        &ctx,
        EngineChoice::Rule,
        None,
        StageSource::Gold,
        crate::backend::InputMode::TextOnly,
    ) {
        case.gold_treatment = Some(GoldTreatment {
            strategy: decision.recommendation.strategy.clone(),
            core_regimen: decision.recommendation.core_regimen.clone(),
            key_considerations: decision.recommendation.key_considerations.clone(),
            reasoning: decision.recommendation.reasoning.clone(),
            extra: serde_json::Map::new(),
        });
    }
    case
}

/// Generate a suite of cases; deterministic under `(n, params)`, and a
/// prefix-stable function of the index.
pub fn generate_suite(n: u64, params: &GenParams) -> Vec<CaseRecord> {
    (0..n).map(|i| generate_case(params, i)).collect()
}

/// Convenience for tests: the sampled gold triple of a generated case.
pub fn gold_triple(case: &CaseRecord) -> (TCategory, NCategory, MCategory) {
    let g = case.gold_staging.as_ref().expect("generated cases carry gold");
    (g.t, g.n, g.m)
}

// ---------------------------------------------------------------------------
// Replay scripts
// ---------------------------------------------------------------------------

use crate::backend::ScriptRule;
use crate::normalize::{deterministic_normalize, dispatch_pools, Certainty};
use crate::profile::{DriverStatus, PsScore, ScenarioId, TriState};
use crate::staging::{stage_all, Engine, SubStageResult};
use crate::treatment::recommend_rule_based;

fn finding_reply_json(f: &crate::normalize::NormalizedFinding) -> serde_json::Value {
    let (status, hedge) = match &f.certainty {
        Certainty::Confirmed => ("confirmed", None),
        Certainty::Uncertain(h) => ("uncertain", Some(h.clone())),
    };
    serde_json::json!({
        "site": f.site,
        "laterality": f.laterality,
        "size_mm": f.size_mm,
        "descriptors": f.descriptors,
        "status": status,
        "hedge": hedge,
        "doc": f.source_span.doc,
        "start": f.source_span.start,
        "end": f.source_span.end,
    })
}

fn stage_reply_json(result: &SubStageResult, pool: &[crate::normalize::NormalizedFinding]) -> String {
    let uncertain: Vec<usize> = pool
        .iter()
        .enumerate()
        .filter(|(_, f)| !f.certainty.is_confirmed())
        .map(|(i, _)| i)
        .collect();
    serde_json::json!({
        "category": result.category.to_string(),
        "uncertain": uncertain,
        "trace": result.trace.iter().map(|s| serde_json::json!({
            "rule": s.rule, "findings": s.findings,
        })).collect::<Vec<_>>(),
    })
    .to_string()
}

fn profile_reply_json(p: &crate::profile::ProfileVector) -> String {
    let driver: serde_json::Value = match p.driver_status {
        DriverStatus::Negative => "negative".into(),
        DriverStatus::Unknown => "unknown".into(),
        DriverStatus::Positive(g) => serde_json::json!({ "positive": g.to_string() }),
    };
    let ps: serde_json::Value = match p.ps_score {
        PsScore::Known(v) => v.into(),
        PsScore::Unknown => "unknown".into(),
    };
    let tri = |v: TriState| match v {
        TriState::Yes => "yes",
        TriState::No => "no",
        TriState::Unknown => "unknown",
    };
    serde_json::json!({
        "histology": p.histology,
        "driver_status": driver,
        "pd_l1": p.pd_l1,
        "ps_score": ps,
        "resection_done": tri(p.resection_done),
        "treatment_line": p.treatment_line,
        "prior_regimens": p.prior_regimens,
        "resectable_intent": tri(p.resectable_intent),
    })
    .to_string()
}

/// Build a scripted-backend rule set that replays the deterministic
/// pipeline's answers for every stage of every case: extraction, the three
/// staging agents, profile extraction, the expert agent, and the three
/// direct-prompt tasks. Rules are sticky and keyed by case id, so one script
/// serves any combination of tasks and modes.
pub fn replay_script(cases: &[CaseRecord], ctx: &PipelineContext) -> Vec<ScriptRule> {
    let mut rules = Vec::new();
    for case in cases {
        let nc = deterministic_normalize(case, &ctx.lexicon);
        let pools = dispatch_pools(&nc.findings, nc.primary_side);
        let extract_reply = serde_json::json!({
            "primary_side": nc.primary_side,
            "findings": nc.findings.iter().map(finding_reply_json).collect::<Vec<_>>(),
        })
        .to_string();
        rules.push(ScriptRule::new("extract", extract_reply).containing(case.id.clone()).sticky());

        if let Ok((t, n, m)) = stage_all(&pools, &Engine::RuleBased, &ctx.rules) {
            rules.push(
                ScriptRule::new("t-stage", stage_reply_json(&t, &pools.e_t))
                    .containing(case.id.clone())
                    .sticky(),
            );
            rules.push(
                ScriptRule::new("n-stage", stage_reply_json(&n, &pools.e_n))
                    .containing(case.id.clone())
                    .sticky(),
            );
            rules.push(
                ScriptRule::new("m-stage", stage_reply_json(&m, &pools.e_m))
                    .containing(case.id.clone())
                    .sticky(),
            );

            let (tc, nc_cat, mc) = (
                t.t_category().expect("T category"),
                n.n_category().expect("N category"),
                m.m_category().expect("M category"),
            );
            let stage = aggregate_stage(tc, nc_cat, mc, &ctx.table);
            let profile = crate::profile::extract_profile_lexicon(
                case,
                stage,
                mc,
                &pools,
                &ctx.routing,
            );
            rules.push(
                ScriptRule::new("profile", profile_reply_json(&profile))
                    .containing(case.id.clone())
                    .sticky(),
            );

            let scenario = crate::profile::route_scenario(&profile);
            if scenario != ScenarioId::MdtReferral {
                let warnings =
                    crate::profile::check_missing_critical(&profile, scenario, &ctx.routing);
                if let Ok(rec) =
                    recommend_rule_based(&profile, scenario, &ctx.guidelines, &warnings)
                {
                    let reply = serde_json::json!({
                        "strategy": rec.strategy,
                        "core_regimen": rec.core_regimen,
                        "key_considerations": rec.key_considerations,
                        "reasoning": rec.reasoning,
                        "cited_blocks": rec.cited_blocks,
                    })
                    .to_string();
                    rules.push(
                        ScriptRule::new(format!("expert-{}", scenario.as_str()), reply)
                            .containing(case.id.clone())
                            .sticky(),
                    );
                }
            }
        }

        if let Some(g) = &case.gold_staging {
            let reply = serde_json::json!({
                "t": g.t.as_str(), "n": g.n.as_str(), "m": g.m.as_str(),
                "reasoning": g.reasoning_evidence,
            })
            .to_string();
            rules.push(
                ScriptRule::new("direct-staging", reply)
                    .containing(case.id.clone())
                    .sticky(),
            );
        }
        if let Some(g) = &case.gold_treatment {
            let reply = serde_json::json!({
                "strategy": g.strategy,
                "core_regimen": g.core_regimen,
                "key_considerations": g.key_considerations,
                "reasoning": g.reasoning,
            })
            .to_string();
            for tag in ["direct-treatment", "direct-e2e"] {
                rules.push(
                    ScriptRule::new(tag, reply.clone())
                        .containing(case.id.clone())
                        .sticky(),
                );
            }
        }
    }
    rules
}

/// A fixed judge script: reasoning quality (4,5,4,5), medication precision
/// two of three matched, similarity 4 of 5.
pub fn judge_script() -> Vec<ScriptRule> {
    vec![
        ScriptRule::new(
            "judge-rq",
            serde_json::json!({
                "t_score": 4, "n_score": 5, "m_score": 4, "synthesis_score": 5,
                "justification": "scripted judge fixture"
            })
            .to_string(),
        )
        .sticky(),
        ScriptRule::new(
            "judge-precision",
            serde_json::json!({
                "predicted_medications": ["a", "b", "c"],
                "reference_medications": ["a", "b", "d"],
                "matched_pairs": [["a", "a"], ["b", "b"]],
            })
            .to_string(),
        )
        .sticky(),
        ScriptRule::new(
            "judge-similarity",
            serde_json::json!({ "score": 4, "justification": "scripted judge fixture" }).to_string(),
        )
        .sticky(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::{deterministic_normalize, dispatch_pools, Lexicon};
    use crate::staging::{stage_all, Engine};

    #[test]
    fn generation_is_deterministic() {
        let params = GenParams {
            seed: 7,
            uncertainty_rate: 0.5,
            modality_dropout_rate: 0.2,
            ..GenParams::default()
        };
        let a = generate_suite(20, &params);
        let b = generate_suite(20, &params);
        assert_eq!(a, b);
        // Prefix stability.
        let c = generate_suite(5, &params);
        assert_eq!(&a[..5], &c[..]);
    }

    #[test]
    fn uncertainty_free_cases_round_trip_exactly() {
        for lang in [Language::Zh, Language::En] {
            let params = GenParams {
                seed: 11,
                language: lang,
                ..GenParams::default()
            };
            for case in generate_suite(60, &params) {
                let normalized = deterministic_normalize(&case, Lexicon::embedded());
                let pools = dispatch_pools(&normalized.findings, normalized.primary_side);
                let (t, n, m) =
                    stage_all(&pools, &Engine::RuleBased, StagingRuleFile::embedded()).unwrap();
                let got = (
                    t.t_category().unwrap(),
                    n.n_category().unwrap(),
                    m.m_category().unwrap(),
                );
                assert_eq!(
                    got,
                    gold_triple(&case),
                    "case {} ({lang}) text: {}",
                    case.id,
                    case.full_text()
                );
            }
        }
    }

    #[test]
    fn dropout_never_removes_imaging() {
        let params = GenParams {
            seed: 3,
            modality_dropout_rate: 0.9,
            ..GenParams::default()
        };
        for case in generate_suite(30, &params) {
            assert!(case.document(Modality::Imaging).is_some());
            assert!(!case.documents.is_empty());
        }
    }

    #[test]
    fn injected_uncertainty_leaves_base_stage_unchanged() {
        let base = GenParams { seed: 21, ..GenParams::default() };
        let with = GenParams {
            seed: 21,
            uncertainty_rate: 1.0,
            ..GenParams::default()
        };
        let plain = generate_suite(30, &base);
        let hedged = generate_suite(30, &with);
        for (a, b) in plain.iter().zip(&hedged) {
            assert_eq!(gold_triple(a), gold_triple(b), "sampling must not drift");
            let normalized = deterministic_normalize(b, Lexicon::embedded());
            let pools = dispatch_pools(&normalized.findings, normalized.primary_side);
            let (t, n, m) =
                stage_all(&pools, &Engine::RuleBased, StagingRuleFile::embedded()).unwrap();
            assert_eq!(
                (t.t_category().unwrap(), n.n_category().unwrap(), m.m_category().unwrap()),
                gold_triple(b),
                "hedged finding must not move the base stage (case {})",
                b.id
            );
        }
    }

    #[test]
    fn distractors_do_not_change_staging() {
        let plain = GenParams { seed: 5, ..GenParams::default() };
        let noisy = GenParams {
            seed: 5,
            distractors: true,
            ..GenParams::default()
        };
        let a = generate_suite(30, &plain);
        let b = generate_suite(30, &noisy);
        for (x, y) in a.iter().zip(&b) {
            let nx = deterministic_normalize(x, Lexicon::embedded());
            let ny = deterministic_normalize(y, Lexicon::embedded());
            let px = dispatch_pools(&nx.findings, nx.primary_side);
            let py = dispatch_pools(&ny.findings, ny.primary_side);
            let rx = stage_all(&px, &Engine::RuleBased, StagingRuleFile::embedded()).unwrap();
            let ry = stage_all(&py, &Engine::RuleBased, StagingRuleFile::embedded()).unwrap();
            assert_eq!(rx.0.category, ry.0.category);
            assert_eq!(rx.1.category, ry.1.category);
            assert_eq!(rx.2.category, ry.2.category);
        }
    }
}
