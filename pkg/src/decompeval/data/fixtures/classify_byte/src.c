int classify_byte(unsigned char c) {
    if (c < 48)
        return 0;
    if (c < 58)
        return 1;
    if (c < 65)
        return 2;
    return 3;
}
