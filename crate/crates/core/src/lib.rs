pub mod autodiff;
pub mod cli;
pub mod dgm_pde;
pub mod fbsde_shoot;
pub mod mfc_direct;
pub mod models;
pub mod net;
pub mod optim;
pub mod oracle;
pub mod output;
pub mod particle;
pub mod stats;
