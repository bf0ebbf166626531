//! Shipped experiment configurations. Every figure preset has a desk-scale
//! variant (the default name) and a `-full` variant with the published
//! parameters.

use std::path::PathBuf;

use crate::config::{
    ArchitectureSection, CsbmSection, ExperimentConfig, HmcSection, MlpSection, ScenarioKind,
    SolverSection, SweepSection, TeacherSection, TemperatureSection,
};

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    build: fn() -> ExperimentConfig,
}

impl Preset {
    pub fn config(&self) -> ExperimentConfig {
        (self.build)()
    }
}

const CSBM_WIDTHS: [usize; 5] = [4, 16, 64, 256, 1024];

fn csbm(full: bool) -> CsbmSection {
    CsbmSection {
        n: if full { 2600 } else { 520 },
        feature_dim: if full { 950 } else { 190 },
        avg_degree: 20.0,
        homophily: 4.0,
        signal_strength: 4.0,
        seed: 1,
    }
}

fn csbm_teacher(full: bool) -> TeacherSection {
    TeacherSection {
        width: if full { 1024 } else { 512 },
        hidden_variance: 1.0,
        readout_variances: vec![0.4, 2.0],
        seed: 3,
        ideal: false,
    }
}

fn csbm_base(
    name: &str,
    full: bool,
    widths: Vec<usize>,
    sigma_w: Vec<f64>,
    hmc: HmcSection,
) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        scenario: ScenarioKind::CsbmStudentTeacher,
        output_dir: PathBuf::from("results").join(name),
        train_ratio: 0.65,
        split_seed: 1,
        csbm: Some(csbm(full)),
        mlp: None,
        dataset: None,
        architecture: Some(ArchitectureSection { branches: 2 }),
        teacher: Some(csbm_teacher(full)),
        sweep: SweepSection { widths, sigma_w },
        temperature: TemperatureSection { multiple: 5e-4 },
        solver: SolverSection::default(),
        hmc,
    }
}

fn hmc(
    widths: Option<Vec<usize>>,
    sigma_w: Option<Vec<f64>>,
    warmup: usize,
    kept: usize,
) -> HmcSection {
    HmcSection {
        enabled: true,
        widths,
        sigma_w,
        warmup,
        kept,
        seed: 11,
        ..HmcSection::default()
    }
}

fn fig1b(full: bool) -> ExperimentConfig {
    let name = if full { "fig1b-full" } else { "fig1b" };
    let mut cfg = csbm_base(
        name,
        full,
        vec![4, 1024],
        vec![1.0],
        hmc(None, None, 500, 1000),
    );
    cfg.hmc.norm_traces = true;
    cfg
}

fn fig2(full: bool) -> ExperimentConfig {
    let name = if full { "fig2-csbm-full" } else { "fig2-csbm" };
    let sampler = if full {
        hmc(None, None, 1000, 2000)
    } else {
        hmc(Some(vec![4, 16]), Some(vec![1.0]), 1000, 2000)
    };
    csbm_base(
        name,
        full,
        CSBM_WIDTHS.to_vec(),
        vec![0.5, 0.8, 1.0, 1.2],
        sampler,
    )
}

fn fig3_4(full: bool) -> ExperimentConfig {
    let name = if full { "fig3-4-full" } else { "fig3-4" };
    let sampler = if full {
        hmc(None, None, 1000, 2000)
    } else {
        hmc(Some(vec![4, 64]), Some(vec![1.0]), 1000, 2000)
    };
    csbm_base(
        name,
        full,
        CSBM_WIDTHS.to_vec(),
        vec![0.5, 0.8, 1.0, 1.2],
        sampler,
    )
}

fn fig9_10(full: bool) -> ExperimentConfig {
    let name = if full { "fig9-10-full" } else { "fig9-10" };
    let (samples, input_dim, teacher_width) = if full {
        (1600, 1024, 1024)
    } else {
        (400, 256, 512)
    };
    let sampler = if full {
        hmc(None, None, 1000, 2000)
    } else {
        hmc(Some(vec![4]), Some(vec![1.0]), 500, 1000)
    };
    ExperimentConfig {
        name: name.to_string(),
        scenario: ScenarioKind::ResidualMlpStudentTeacher,
        output_dir: PathBuf::from("results").join(name),
        train_ratio: 0.8,
        split_seed: 1,
        csbm: None,
        mlp: Some(MlpSection {
            samples,
            input_dim,
            seed: 1,
        }),
        dataset: None,
        architecture: None,
        teacher: Some(TeacherSection {
            width: teacher_width,
            hidden_variance: 1.0,
            readout_variances: vec![2.4, 0.4],
            seed: 3,
            ideal: false,
        }),
        sweep: SweepSection {
            widths: CSBM_WIDTHS.to_vec(),
            sigma_w: vec![0.6, 0.8, 1.0, 1.2, 1.5],
        },
        temperature: TemperatureSection { multiple: 1e-3 },
        solver: SolverSection::default(),
        hmc: sampler,
    }
}

pub static PRESETS: &[Preset] = &[
    Preset {
        name: "fig1b",
        description:
            "CSBM student-teacher norms at N=4 and N=1024, sigma_w=1, with HMC (n=520, N0=190)",
        build: || fig1b(false),
    },
    Preset {
        name: "fig1b-full",
        description: "as fig1b at n=2600, N0=950, teacher width 1024",
        build: || fig1b(true),
    },
    Preset {
        name: "fig2-csbm",
        description:
            "branch norm sweep over N and sigma_w (n=520, N0=190); HMC at N in {4,16}, sigma_w=1",
        build: || fig2(false),
    },
    Preset {
        name: "fig2-csbm-full",
        description: "as fig2-csbm at n=2600, N0=950 with HMC at every point",
        build: || fig2(true),
    },
    Preset {
        name: "fig3-4",
        description:
            "bias/variance sweep over N and sigma_w (n=520, N0=190); HMC at N in {4,64}, sigma_w=1",
        build: || fig3_4(false),
    },
    Preset {
        name: "fig3-4-full",
        description: "as fig3-4 at n=2600, N0=950 with HMC at every point",
        build: || fig3_4(true),
    },
    Preset {
        name: "fig9-10",
        description: "residual-MLP student-teacher sweep (N0=256, P=320); HMC at N=4, sigma_w=1",
        build: || fig9_10(false),
    },
    Preset {
        name: "fig9-10-full",
        description: "as fig9-10 at N0=1024, P=1280, teacher width 1024",
        build: || fig9_10(true),
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}
