fn main() {
    env_logger::init();
    std::process::exit(convexfit::cli::run(std::env::args_os()));
}
