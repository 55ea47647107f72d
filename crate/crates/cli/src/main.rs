fn main() {
    std::process::exit(pose_forge_cli::run(std::env::args_os()));
}
