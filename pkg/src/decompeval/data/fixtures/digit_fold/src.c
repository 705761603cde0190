int digit_fold(const unsigned char *s, unsigned long n) {
    int acc = 0;
    unsigned long i = 0;
    while (i != n) {
        if (s[i] >= '0' && s[i] <= '9')
            acc = acc * 2 + (s[i] - '0');
        i++;
    }
    return acc & 0x7fffffff;
}
