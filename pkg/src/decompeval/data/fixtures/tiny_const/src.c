int tiny_const(void) {
    return 7;
}
