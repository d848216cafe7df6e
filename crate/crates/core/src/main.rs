fn main() {
    std::process::exit(spg_fuse::cli::run_cli(std::env::args_os()));
}
