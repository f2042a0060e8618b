pub mod numeric;
pub mod visual;
