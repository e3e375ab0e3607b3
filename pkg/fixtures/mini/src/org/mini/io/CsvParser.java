package org.mini.io;

import java.util.ArrayList;
import java.util.List;

public class CsvParser {

    private final char delimiter;

    public CsvParser(char delimiter) {
        this.delimiter = delimiter;
    }

    public List<String> parseLine(String line) {
        List<String> out = new ArrayList<>();
        for (String field : splitFields(line)) {
            out.add(unquote(field));
        }
        return out;
    }

    List<String> splitFields(String line) {
        List<String> fields = new ArrayList<>();
        StringBuilder cur = new StringBuilder();
        boolean quoted = false;
        for (char c : line.toCharArray()) {
            if (isQuote(c)) {
                quoted = !quoted;
                cur.append(c);
            } else if (c == delimiter && !quoted) {
                fields.add(cur.toString());
                cur.setLength(0);
            } else {
                cur.append(c);
            }
        }
        fields.add(cur.toString());
        return fields;
    }

    String unquote(String field) {
        if (field.length() >= 2 && isQuote(field.charAt(0))) {
            return field.substring(1, field.length() - 1);
        }
        return field;
    }

    static boolean isQuote(char c) {
        return c == '"';
    }
}
