// Training churns through large short-lived buffers; the system allocator
// returns them to the OS on every free.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    std::process::exit(daylight_cli::run(std::env::args_os()));
}
