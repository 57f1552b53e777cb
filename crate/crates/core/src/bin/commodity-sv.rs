fn main() {
    std::process::exit(commodity_sv::cli::run(std::env::args_os()));
}
