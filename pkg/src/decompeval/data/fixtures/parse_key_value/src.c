int parse_key_value(const unsigned char *s, unsigned long n) {
    unsigned long i = 0;
    while (i < n && s[i] != '=')
        i++;
    if (i == n)
        return -1;
    return (int)i;
}
