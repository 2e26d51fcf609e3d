pub mod assets;
pub mod augment;
pub mod codec;
pub mod geom;
pub mod rectify;
pub mod scalar;
pub mod softraster;
pub mod tensor;
pub mod trainer;
pub mod vecdraw;
