#[no_mangle]
pub extern "C" fn ps_placeholder() -> u32 { pcstyle::placeholder() }
