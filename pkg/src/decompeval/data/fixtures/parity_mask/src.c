int parity_mask(const unsigned char *d, unsigned long n) {
    if (n < 4)
        return 0;
    int mask = 0;
    for (unsigned long i = 0; i < 4; i++)
        mask = (mask << 1) | (d[i] & 1);
    return mask;
}
