int call_hidden_helper(const unsigned char *d, unsigned long n) {
    if (n < 2)
        return -1;
    return secret_blend(d[0], d[1]);
}
