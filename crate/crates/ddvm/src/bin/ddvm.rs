fn main() {
    // placeholder during bring-up; replaced by the CLI dispatcher
}
