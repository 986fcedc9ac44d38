fn main() {
    odip::harness::init_thread_pool();
    std::process::exit(odip::harness::cli::main_from_args(std::env::args_os()));
}
