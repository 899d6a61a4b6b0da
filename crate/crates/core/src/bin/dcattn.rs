fn main() {
    dcattn::parallel::init_from_env();
    std::process::exit(dcattn::cli::run(std::env::args_os()));
}
