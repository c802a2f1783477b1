fn main() {
    kilosound::app::main();
}
