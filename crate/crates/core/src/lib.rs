pub mod agreement;
pub mod autodiff;
pub mod distill;
pub mod evalsuite;
pub mod lora;
pub mod scorer;
pub mod seed;
pub mod template;
pub mod workbench;
