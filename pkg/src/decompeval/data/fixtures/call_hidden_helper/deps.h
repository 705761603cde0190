int secret_blend(int a, int b);
