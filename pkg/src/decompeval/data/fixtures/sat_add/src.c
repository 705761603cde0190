int sat_add(unsigned char a, unsigned char b) {
    int s = a + b;
    if (s < 255)
        return s;
    return -1;
}
