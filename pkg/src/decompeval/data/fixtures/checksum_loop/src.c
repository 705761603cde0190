int checksum_loop(const unsigned char *d, unsigned long n) {
    int sum = 0;
    for (unsigned long i = 0; i < n; i++)
        sum += d[i] + 7;
    return sum & 0xff;
}
