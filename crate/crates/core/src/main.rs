fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    canodepth::init_threads_from_env();
    std::process::exit(canodepth::cli::run(std::env::args_os()));
}
